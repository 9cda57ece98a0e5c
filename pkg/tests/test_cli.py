"""CLI contract: exit codes, error naming, determinism, artifact schema.

Runs the CLI in-process through run_cli for speed; one subprocess test
confirms the installed entry point behaves the same.
"""

import csv
import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from popsat.cli import run_cli


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a small synthetic world and a 2-epoch checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    world = root / "world"
    assert run_cli(["synth-data", "--seed", "7", "--tiles", "24",
                    "--resolution", "32", "--out", str(world)]) == 0
    ckpt = root / "model.sck"
    assert run_cli(["train", "--data", str(world), "--out", str(ckpt),
                    "--epochs", "2", "--epochs-per-stage", "1",
                    "--batch", "4", "--lr", "0.002", "--seed", "3"]) == 0
    pop = root / "pop.json"
    grid = [[float(5 + (i * 7 + j * 3) % 11) for j in range(16)]
            for i in range(16)]
    pop.write_text(json.dumps(grid))
    return {"root": root, "world": world, "ckpt": ckpt, "pop": pop,
            "record": world / "tile00000.scr"}


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            run_cli(["frobnicate"])
        assert e.value.code == 2

    def test_missing_required_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            run_cli(["generate", "--seed", "1"])
        assert e.value.code == 2

    def test_missing_checkpoint_names_flag(self, ws, tmp_path, capsys):
        rc = run_cli(["generate", "--ckpt", str(tmp_path / "nope.sck"),
                      "--seed", "1", "--pop", str(ws["pop"]),
                      "--out", str(tmp_path / "g.png")])
        assert rc == 1
        assert "--ckpt" in capsys.readouterr().err

    def test_missing_pop_file_names_flag(self, ws, tmp_path, capsys):
        rc = run_cli(["generate", "--ckpt", str(ws["ckpt"]), "--seed", "1",
                      "--pop", str(tmp_path / "nope.json"),
                      "--out", str(tmp_path / "g.png")])
        assert rc == 1
        assert "--pop" in capsys.readouterr().err

    def test_negative_population_rejected(self, ws, tmp_path, capsys):
        bad = tmp_path / "neg.json"
        bad.write_text("[[1.0, -2.0], [0.0, 3.0]]")
        rc = run_cli(["generate", "--ckpt", str(ws["ckpt"]), "--seed", "1",
                      "--pop", str(bad), "--out", str(tmp_path / "g.png")])
        assert rc == 1
        assert "--pop" in capsys.readouterr().err

    def test_success_is_zero(self, ws, tmp_path):
        out = tmp_path / "g.png"
        assert run_cli(["generate", "--ckpt", str(ws["ckpt"]), "--seed", "1",
                        "--pop", str(ws["pop"]), "--out", str(out)]) == 0
        assert out.exists()

    def test_subprocess_entry_point_matches(self, ws, tmp_path):
        p = subprocess.run(
            [sys.executable, "-m", "popsat.cli", "generate",
             "--ckpt", str(tmp_path / "nope.sck"), "--seed", "1",
             "--pop", str(ws["pop"]), "--out", str(tmp_path / "g.png")],
            capture_output=True, text=True)
        assert p.returncode == 1
        assert "--ckpt" in p.stderr


class TestDeterminism:
    def test_retraining_is_byte_identical(self, ws, tmp_path):
        ckpt2 = tmp_path / "model2.sck"
        assert run_cli(["train", "--data", str(ws["world"]),
                        "--out", str(ckpt2), "--epochs", "2",
                        "--epochs-per-stage", "1", "--batch", "4",
                        "--lr", "0.002", "--seed", "3"]) == 0
        assert filecmp.cmp(ws["ckpt"], ckpt2, shallow=False)
        assert filecmp.cmp(str(ws["ckpt"]) + ".curves.png",
                           str(ckpt2) + ".curves.png", shallow=False)

    def test_generate_repeats_exactly(self, ws, tmp_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        for out in (a, b):
            assert run_cli(["generate", "--ckpt", str(ws["ckpt"]),
                            "--seed", "11", "--pop", str(ws["pop"]),
                            "--out", str(out)]) == 0
        assert filecmp.cmp(a, b, shallow=False)

    def test_style_file_reproduces_seeded_image(self, ws, tmp_path):
        seeded, styled = tmp_path / "s1.png", tmp_path / "s2.png"
        style = tmp_path / "style.json"
        assert run_cli(["generate", "--ckpt", str(ws["ckpt"]), "--seed", "11",
                        "--pop", str(ws["pop"]), "--out", str(seeded),
                        "--style-out", str(style)]) == 0
        assert run_cli(["generate", "--ckpt", str(ws["ckpt"]),
                        "--style-file", str(style), "--pop", str(ws["pop"]),
                        "--out", str(styled)]) == 0
        assert filecmp.cmp(seeded, styled, shallow=False)

    def test_eval_artifacts_repeat_exactly(self, ws, tmp_path):
        c1, c2 = tmp_path / "e1.csv", tmp_path / "e2.csv"
        for out in (c1, c2):
            assert run_cli(["eval", "--ckpt", str(ws["ckpt"]),
                            "--data", str(ws["world"]), "--out-csv", str(out),
                            "--fid", "--pairs"]) == 0
        assert filecmp.cmp(c1, c2, shallow=False)
        assert filecmp.cmp(str(c1) + ".hist.png", str(c2) + ".hist.png",
                           shallow=False)

    def test_effect_map_repeats_exactly(self, ws, tmp_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        for out in (a, b):
            assert run_cli(["effect-map", "--ckpt", str(ws["ckpt"]),
                            "--pop-a", str(ws["pop"]), "--pop-b",
                            str(ws["pop"]), "--k", "3", "--out",
                            str(out)]) == 0
        assert filecmp.cmp(a, b, shallow=False)


class TestArtifacts:
    def test_eval_csv_schema(self, ws, tmp_path):
        out = tmp_path / "e.csv"
        assert run_cli(["eval", "--ckpt", str(ws["ckpt"]),
                        "--data", str(ws["world"]), "--out-csv", str(out),
                        "--pairs"]) == 0
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["tile_id", "pixel_l2", "semantic_l2"]
        mean_rows = [r for r in rows if r[0] == "mean"]
        assert len(mean_rows) == 1
        tile_rows = [r for r in rows[1:] if r[0] not in ("mean", "fid")]
        assert tile_rows, "expected one row per held-out tile"
        pix = [float(r[1]) for r in tile_rows]
        assert float(mean_rows[0][1]) == pytest.approx(np.mean(pix), rel=1e-4)

    def test_reconstruct_and_repopulate(self, ws, tmp_path):
        rec_png = tmp_path / "rec.png"
        assert run_cli(["reconstruct", "--ckpt", str(ws["ckpt"]),
                        "--record", str(ws["record"]),
                        "--out", str(rec_png)]) == 0
        assert rec_png.exists()
        rp_png = tmp_path / "rp.png"
        assert run_cli(["repopulate", "--ckpt", str(ws["ckpt"]),
                        "--record", str(ws["record"]),
                        "--pop-new", str(ws["pop"]),
                        "--out", str(rp_png)]) == 0
        assert rp_png.exists()

    def test_repopulate_shape_mismatch_names_flag(self, ws, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("[[1.0, 2.0], [3.0, 4.0]]")
        rc = run_cli(["repopulate", "--ckpt", str(ws["ckpt"]),
                      "--record", str(ws["record"]), "--pop-new", str(bad),
                      "--out", str(tmp_path / "x.png")])
        assert rc == 1
        assert "--pop-new" in capsys.readouterr().err

    def test_effect_map_extras(self, ws, tmp_path):
        out = tmp_path / "em.png"
        raw = tmp_path / "em.npy"
        fig = tmp_path / "em_fig.png"
        assert run_cli(["effect-map", "--ckpt", str(ws["ckpt"]),
                        "--pop-a", str(ws["pop"]), "--pop-b", str(ws["pop"]),
                        "--k", "3", "--out", str(out),
                        "--raw-out", str(raw), "--fig-out", str(fig)]) == 0
        assert out.exists() and fig.exists()
        # identical grids must produce an exactly zero effect map
        assert np.load(raw).max() == 0.0
