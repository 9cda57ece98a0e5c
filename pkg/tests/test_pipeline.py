import numpy as np
import pytest

from popsat import pipeline as pl
from popsat.dataset import ContractError, FormatError
from popsat.model import Model, ModelConfig


@pytest.fixture
def loaded(tmp_path):
    cfg = ModelConfig(z_dim=12, w_dim=12, max_stage=1, channels_per_stage=(12, 8))
    model = Model(cfg, seed=3)
    rng = np.random.default_rng(3)
    for name, p in model.params.items():
        if ".pop." in name or name.startswith("head.l2"):
            p.data[:] = rng.standard_normal(p.data.shape) * 0.05
    path = tmp_path / "m.sck"
    pl.save_checkpoint(model, path, pop_log_min=0.0, pop_log_max=8.0,
                       metadata={"note": "test"})
    return pl.load_checkpoint(path), model, path


class TestCheckpoint:
    def test_round_trip_bit_identical_forward(self, loaded):
        restored, original, _ = loaded
        rng = np.random.default_rng(0)
        w = original.map_latent(rng.standard_normal((2, 12)))
        pop = rng.uniform(-1, 1, (2, 8, 8))
        a = original.synthesize(w, pop).data
        b = restored.model.synthesize(w, pop).data
        np.testing.assert_array_equal(a, b)

    def test_round_trip_params_exact(self, loaded):
        restored, original, _ = loaded
        assert restored.model.group_checksums() == original.group_checksums()
        assert restored.pop_log_min == 0.0 and restored.pop_log_max == 8.0
        assert restored.metadata["note"] == "test"

    def test_config_preserved(self, loaded):
        restored, _, _ = loaded
        assert restored.model.cfg.z_dim == 12
        assert restored.stage == 1 and restored.resolution == 8

    def test_corrupted_header_length(self, loaded, tmp_path):
        _, _, path = loaded
        blob = bytearray(path.read_bytes())
        blob[8:16] = (2 ** 60).to_bytes(8, "little")
        bad = tmp_path / "bad.sck"
        bad.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            pl.load_checkpoint(bad)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.sck"
        p.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(FormatError):
            pl.load_checkpoint(p)

    def test_version_mismatch(self, loaded, tmp_path):
        _, _, path = loaded
        blob = bytearray(path.read_bytes())
        blob[4:8] = (9).to_bytes(4, "little")
        bad = tmp_path / "v9.sck"
        bad.write_bytes(bytes(blob))
        with pytest.raises(pl.UnsupportedVersionError):
            pl.load_checkpoint(bad)

    def test_missing_tensor(self, loaded, tmp_path):
        restored, original, _ = loaded
        del original.params["head.l0.w"]
        p = tmp_path / "m2.sck"
        pl.save_checkpoint(original, p, 0.0, 1.0)
        with pytest.raises(FormatError):
            pl.load_checkpoint(p)

    def test_checkpoint_id_changes_with_content(self, loaded, tmp_path):
        restored, original, _ = loaded
        original.params["head.l0.w"].data[0, 0] += 1.0
        p2 = tmp_path / "m3.sck"
        pl.save_checkpoint(original, p2, 0.0, 8.0)
        assert pl.load_checkpoint(p2).checkpoint_id != restored.checkpoint_id


class TestWorkflows:
    def test_reconstruct_shape_and_determinism(self, loaded):
        restored, _, _ = loaded
        rng = np.random.default_rng(1)
        img = rng.uniform(-1, 1, (3, 8, 8))
        pop = rng.uniform(-1, 1, (8, 8))[None]
        a = pl.reconstruct(restored, img, pop)
        b = pl.reconstruct(restored, img, pop)
        assert a.shape == img.shape
        np.testing.assert_array_equal(a, b)

    def test_reconstruct_does_not_mutate_inputs(self, loaded):
        restored, _, _ = loaded
        rng = np.random.default_rng(2)
        img = rng.uniform(-1, 1, (3, 8, 8))
        pop = rng.uniform(-1, 1, (1, 8, 8))
        img0, pop0 = img.copy(), pop.copy()
        pl.reconstruct(restored, img, pop)
        np.testing.assert_array_equal(img, img0)
        np.testing.assert_array_equal(pop, pop0)

    def test_repopulate_same_pop_equals_reconstruct(self, loaded):
        restored, _, _ = loaded
        rng = np.random.default_rng(3)
        img = rng.uniform(-1, 1, (3, 8, 8))
        pop = rng.uniform(-1, 1, (1, 8, 8))
        a = pl.repopulate(restored, img, pop, pop)
        b = pl.reconstruct(restored, img, pop)
        np.testing.assert_array_equal(a, b)

    def test_repopulate_resolution_mismatch(self, loaded):
        restored, _, _ = loaded
        img = np.zeros((3, 8, 8))
        with pytest.raises(ContractError):
            pl.repopulate(restored, img, np.zeros((1, 8, 8)), np.zeros((1, 4, 4)))

    def test_reconstruct_wrong_resolution(self, loaded):
        restored, _, _ = loaded
        with pytest.raises(ContractError):
            pl.reconstruct(restored, np.zeros((3, 16, 16)), np.zeros((1, 8, 8)))


class TestInterpolation:
    def test_endpoints(self):
        rng = np.random.default_rng(4)
        w1, w2 = rng.standard_normal(8), rng.standard_normal(8)
        np.testing.assert_array_equal(pl.interpolate_styles(w1, w2, 0.0), w1)
        np.testing.assert_array_equal(pl.interpolate_styles(w1, w2, 1.0), w2)
        for mode in ("linear", "spherical"):
            np.testing.assert_allclose(pl.interpolate_styles(w1, w2, 0.0, mode),
                                       w1, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(pl.interpolate_styles(w1, w2, 1.0, mode),
                                       w2, rtol=1e-12, atol=1e-12)

    def test_linear_midpoint(self):
        w1, w2 = np.zeros(4), np.ones(4)
        np.testing.assert_array_equal(pl.interpolate_styles(w1, w2, 0.5), np.full(4, 0.5))

    def test_spherical_norm_preserved(self):
        rng = np.random.default_rng(5)
        u = rng.standard_normal(16)
        v = rng.standard_normal(16)
        r = 2.7
        w1 = r * u / np.linalg.norm(u)
        w2 = r * v / np.linalg.norm(v)
        for t in np.linspace(0, 1, 11):
            out = pl.interpolate_styles(w1, w2, float(t), "spherical")
            assert np.linalg.norm(out) == pytest.approx(r, abs=1e-9)

    def test_contract_errors(self):
        w = np.ones(4)
        with pytest.raises(ContractError):
            pl.interpolate_styles(w, w, 1.5)
        with pytest.raises(ContractError):
            pl.interpolate_styles(np.zeros(4), w, 0.5, "spherical")
        with pytest.raises(ContractError):
            pl.interpolate_styles(w, np.ones(5), 0.5)


class TestPng:
    def test_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(6)
        img = rng.uniform(-1, 1, (3, 16, 16))
        p = tmp_path / "t.png"
        pl.write_png(img, p)
        back = pl.read_png(p)
        assert np.abs(back - img).max() <= 1.0 / 127.5

    def test_bytes_deterministic(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(-1, 1, (3, 8, 8))
        assert pl.png_bytes(img) == pl.png_bytes(img)

    def test_heatmap_zero_is_black(self):
        from PIL import Image
        import io
        data = pl.heatmap_png_bytes(np.zeros((8, 8)))
        arr = np.asarray(Image.open(io.BytesIO(data)))
        np.testing.assert_array_equal(arr, 0)
