"""Command-line surface for the whole workflow.

Exit codes: 0 success, 1 runtime/validation failure, 2 usage error.  Every
error message names the offending flag or file.  All randomness flows from
--seed, and rerunning a subcommand with the same flags produces
byte-identical artifacts (timing columns in training logs excepted).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import autodiff as ad
from .dataset import (ContractError, FormatError, ValidationError,
                      load_dataset, load_record, resample_grid,
                      split_holdout, synthesize_world)
from .metrics import (FeatureExtractor, feature_stats, frechet_distance,
                      histogram, pixel_distance, population_effect_map,
                      semantic_distance)
from .model import Model, ModelConfig
from .pipeline import (load_checkpoint, reconstruct, repopulate,
                       save_checkpoint, write_png)
from .training import TrainConfig, TrainingError, train

_ERRORS = (ContractError, FormatError, ValidationError, TrainingError,
           ad.AutodiffError, OSError)


class CliError(RuntimeError):
    pass


def _load_pop_json(path, flag):
    """JSON nested array of raw persons/cell -> [H,W] float grid."""
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise CliError(f"{flag}: cannot read {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise CliError(f"{flag}: {path} is not valid JSON: {e}") from e
    try:
        grid = np.asarray(data, dtype=np.float64)
    except (TypeError, ValueError):
        raise CliError(f"{flag}: {path} is not a rectangular numeric grid")
    if grid.ndim != 2 or grid.size == 0:
        raise CliError(f"{flag}: {path} must hold a non-empty 2-d grid")
    if not np.all(np.isfinite(grid)) or grid.min() < 0:
        raise CliError(f"{flag}: {path} has negative or non-finite cells")
    return grid


def _at_model_resolution(image, loaded):
    """Area-average a [3,R,R] record image down to the checkpoint's
    resolution (identity when they already match)."""
    res = loaded.resolution
    if image.shape[1] == res:
        return image
    return resample_grid(image, (res, res))


def _load_ckpt(path, flag="--ckpt"):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as e:
        raise CliError(f"{flag}: no such checkpoint {path}") from e
    except FormatError as e:
        raise CliError(f"{flag}: {e}") from e


def _save_figure(fig, path):
    # fixed dpi and scrubbed metadata keep reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": "popsat"})


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


# -- subcommands -----------------------------------------------------------

def _cmd_synth_data(args):
    synthesize_world(seed=args.seed, n_tiles=args.tiles,
                     resolution=args.resolution, out_dir=args.out)
    print(f"wrote {args.tiles} tiles to {args.out}")
    return 0


def _cmd_train(args):
    try:
        manifest, records = load_dataset(args.data)
    except _ERRORS as e:
        raise CliError(f"--data: {e}") from e
    model = Model(ModelConfig(), seed=args.seed)
    cfg = TrainConfig(epochs_per_stage=args.epochs_per_stage,
                      total_epochs=args.epochs, base_lr=args.lr,
                      batch_size=args.batch, seed=args.seed)
    log_path = args.log if args.log else args.out + ".log.csv"
    rows = train(model, records, manifest, cfg, log_path=log_path)
    save_checkpoint(model, args.out,
                    pop_log_min=manifest.pop_log_min,
                    pop_log_max=manifest.pop_log_max,
                    stage=min((cfg.total_epochs - 1) // cfg.epochs_per_stage,
                              model.cfg.max_stage),
                    alpha=1.0,
                    metadata={"seed": args.seed, "epochs": cfg.total_epochs,
                              "data": args.data})
    curves_path = args.curves if args.curves else args.out + ".curves.png"
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = [r["epoch"] for r in rows]
    for key in ("loss_d", "loss_g", "loss_r"):
        ax.plot(epochs, [r[key] for r in rows], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training losses")
    fig.tight_layout()
    _save_figure(fig, curves_path)
    plt.close(fig)
    print(f"checkpoint {args.out}; log {log_path}; curves {curves_path}")
    return 0


def _style_from_args(args, loaded):
    if args.style_file is not None:
        try:
            with open(args.style_file) as f:
                w = np.asarray(json.load(f), dtype=np.float64)
        except OSError as e:
            raise CliError(
                f"--style-file: cannot read {args.style_file}: {e.strerror}")
        except (json.JSONDecodeError, TypeError, ValueError) as e:
            raise CliError(f"--style-file: {args.style_file}: {e}")
        if w.shape != (loaded.model.cfg.w_dim,):
            raise CliError(f"--style-file: style must have "
                           f"{loaded.model.cfg.w_dim} entries")
        return w
    z = np.random.default_rng(args.seed).standard_normal(
        (1, loaded.model.cfg.z_dim))
    with ad.no_grad():
        return loaded.model.map_latent(z).data[0]


def _cmd_generate(args):
    loaded = _load_ckpt(args.ckpt)
    pop = _load_pop_json(args.pop, "--pop")
    w = _style_from_args(args, loaded)
    with ad.no_grad():
        img = loaded.model.synthesize(
            w[None], loaded.normalize_pop(pop)[None],
            loaded.stage, loaded.alpha).data[0]
    write_png(img, args.out)
    if args.style_out:
        with open(args.style_out, "w") as f:
            json.dump(w.tolist(), f)
            f.write("\n")
    print(f"wrote {args.out}")
    return 0


def _cmd_reconstruct(args):
    loaded = _load_ckpt(args.ckpt)
    try:
        record = load_record(args.record)
    except _ERRORS as e:
        raise CliError(f"--record: {e}") from e
    image = _at_model_resolution(record.image, loaded)
    pop = loaded.normalize_pop(record.pop)
    out = reconstruct(loaded, image, pop[None])
    write_png(out, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_repopulate(args):
    loaded = _load_ckpt(args.ckpt)
    try:
        record = load_record(args.record)
    except _ERRORS as e:
        raise CliError(f"--record: {e}") from e
    pop_new = _load_pop_json(args.pop_new, "--pop-new")
    if pop_new.shape != record.pop.shape:
        raise CliError(
            f"--pop-new: grid is {pop_new.shape[0]}x{pop_new.shape[1]} but "
            f"the record's grid is {record.pop.shape[0]}x{record.pop.shape[1]}")
    out = repopulate(loaded, _at_model_resolution(record.image, loaded),
                     loaded.normalize_pop(record.pop)[None],
                     loaded.normalize_pop(pop_new)[None])
    write_png(out, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args):
    loaded = _load_ckpt(args.ckpt)
    try:
        manifest, records = load_dataset(args.data)
    except _ERRORS as e:
        raise CliError(f"--data: {e}") from e
    _, holdout = split_holdout(records)
    extractor = FeatureExtractor()
    rows = []
    pixel_vals, semantic_vals = [], []
    for record in holdout:
        pop = loaded.normalize_pop(record.pop)[None]
        image = _at_model_resolution(record.image, loaded)
        rec = reconstruct(loaded, image, pop)
        p = pixel_distance(image, rec)
        s = semantic_distance(image, rec, extractor)
        pixel_vals.append(p)
        semantic_vals.append(s)
        rows.append((record.tile_id, p, s))
    with open(args.out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tile_id", "pixel_l2", "semantic_l2"])
        if args.pairs:
            for tile_id, p, s in rows:
                writer.writerow([tile_id, f"{p:.6f}", f"{s:.6f}"])
        writer.writerow(["mean", f"{float(np.mean(pixel_vals)):.6f}",
                         f"{float(np.mean(semantic_vals)):.6f}"])
        if args.fid:
            real = np.stack([_at_model_resolution(r.image, loaded)
                             for r in holdout])
            pops = loaded.normalize_pop(np.stack([r.pop for r in holdout]))
            z = np.random.default_rng(args.seed).standard_normal(
                (len(holdout), loaded.model.cfg.z_dim))
            fakes = []
            with ad.no_grad():
                for start in range(0, len(holdout), 25):
                    fakes.append(loaded.model.generate(
                        z[start:start + 25], pops[start:start + 25],
                        loaded.stage, loaded.alpha).data)
            fid = frechet_distance(feature_stats(real, extractor),
                                   feature_stats(np.concatenate(fakes),
                                                 extractor))
            writer.writerow(["fid", f"{fid:.6f}", ""])
    hist_path = args.hist_out if args.hist_out else args.out_csv + ".hist.png"
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, vals, name in ((axes[0], pixel_vals, "pixel_l2"),
                           (axes[1], semantic_vals, "semantic_l2")):
        edges, counts = histogram(vals, args.hist_bins)
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge")
        ax.set_xlabel(name)
        ax.set_ylabel("tiles")
    fig.suptitle("held-out reconstruction distances")
    fig.tight_layout()
    _save_figure(fig, hist_path)
    plt.close(fig)
    print(f"wrote {args.out_csv} and {hist_path}")
    return 0


def _cmd_effect_map(args):
    loaded = _load_ckpt(args.ckpt)
    pop_a = _load_pop_json(args.pop_a, "--pop-a")
    pop_b = _load_pop_json(args.pop_b, "--pop-b")
    if pop_a.shape != pop_b.shape:
        raise CliError(f"--pop-b: grid is {pop_b.shape[0]}x{pop_b.shape[1]} "
                       f"but --pop-a grid is {pop_a.shape[0]}x{pop_a.shape[1]}")
    emap = population_effect_map(loaded.model, loaded.normalize_pop(pop_a),
                                 loaded.normalize_pop(pop_b), k_styles=args.k,
                                 seed=args.seed, stage=loaded.stage,
                                 alpha=loaded.alpha)
    from .pipeline import heatmap_png_bytes
    with open(args.out, "wb") as f:
        f.write(heatmap_png_bytes(emap))
    if args.raw_out:
        np.save(args.raw_out, emap)
    if args.fig_out:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(emap, cmap="magma")
        fig.colorbar(im, ax=ax, label="mean |Δpixel|")
        ax.set_title(f"population effect map (k={args.k})")
        fig.tight_layout()
        _save_figure(fig, args.fig_out)
        plt.close(fig)
    print(f"wrote {args.out}")
    return 0


def _cmd_serve(args):
    from . import service
    import uvicorn
    try:
        service.load_model(args.ckpt)
    except (FileNotFoundError, FormatError) as e:
        raise CliError(f"--ckpt: {e}") from e
    uvicorn.run(service.app, host=args.host, port=args.port, log_level="info")
    return 0


# -- parser ----------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="popsat",
        description="Population-conditioned satellite-style tile model: "
                    "synthetic data, training, generation, editing, "
                    "evaluation, and serving.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tiles", type=int, default=2000)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int, default=64)
    p.add_argument("--epochs-per-stage", type=int, default=16)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="metrics CSV (default: OUT.log.csv)")
    p.add_argument("--curves", help="loss-curve figure (default: "
                                    "OUT.curves.png)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="generate a tile from noise or style")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style-file", help="JSON style vector instead of --seed")
    p.add_argument("--pop", required=True, help="JSON population grid "
                                                "(raw persons/cell)")
    p.add_argument("--out", required=True)
    p.add_argument("--style-out", help="write the used style vector as JSON")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("reconstruct", help="encode + regenerate a record")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--record", required=True, help=".scr tile record")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("repopulate",
                       help="regenerate a record under an edited grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--pop-new", required=True, help="JSON population grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_repopulate)

    p = sub.add_parser("eval", help="held-out reconstruction report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--fid", action="store_true",
                   help="also report generated-vs-holdout Fréchet distance")
    p.add_argument("--pairs", action="store_true",
                   help="one CSV row per held-out tile")
    p.add_argument("--hist-bins", type=int, default=10)
    p.add_argument("--hist-out", help="histogram figure path "
                                      "(default: OUT_CSV.hist.png)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("effect-map",
                       help="where population edits change the output")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pop-a", required=True)
    p.add_argument("--pop-b", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="grayscale heatmap PNG")
    p.add_argument("--raw-out", help="also save the raw map as .npy")
    p.add_argument("--fig-out", help="also save an annotated figure")
    p.set_defaults(func=_cmd_effect_map)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=_cmd_serve)

    return parser


def run_cli(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except _ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
