"""End-to-end conditioning experiment: train on a synthetic world, then
measure whether population conditioning actually steers generation.

The experiment is fully seeded and cache-friendly: `run_experiment` skips
any stage whose artifact already exists in the work directory, so an
interrupted or pre-computed run can be resumed / re-evaluated cheaply.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import autodiff as ad
from .dataset import (builtup_score, load_dataset, normalize_population,
                      split_holdout, synthesize_world)
from .metrics import (FeatureExtractor, feature_stats, frechet_distance,
                      pixel_distance, population_effect_map)
from .model import Model, ModelConfig
from .pipeline import LoadedModel, load_checkpoint, reconstruct, save_checkpoint
from .training import TrainConfig, train

N_TILES = 2000
RESOLUTION = 32
HOLDOUT_FRACTION = 0.1


def run_experiment(workdir, seed, progress=None):
    """Synthesize the world (if absent), train (if absent), and return the
    checkpoint path.  All randomness derives from `seed`."""
    os.makedirs(workdir, exist_ok=True)
    world_dir = os.path.join(workdir, "world")
    manifest_path = os.path.join(world_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        synthesize_world(seed=seed, n_tiles=N_TILES, resolution=RESOLUTION,
                         out_dir=world_dir)
    ckpt_path = os.path.join(workdir, "model.sck")
    if not os.path.exists(ckpt_path):
        manifest, records = load_dataset(world_dir)
        train_records, _ = split_holdout(records, HOLDOUT_FRACTION)
        model = Model(ModelConfig(), seed=seed)
        cfg = TrainConfig(seed=seed)
        t0 = time.monotonic()
        train(model, train_records, manifest, cfg,
              log_path=os.path.join(workdir, "training_log.csv"),
              progress=progress)
        wall_minutes = (time.monotonic() - t0) / 60.0
        save_checkpoint(model, ckpt_path,
                        pop_log_min=manifest.pop_log_min,
                        pop_log_max=manifest.pop_log_max,
                        stage=model.cfg.max_stage, alpha=1.0,
                        metadata={"seed": seed,
                                  "wall_minutes": round(wall_minutes, 2)})
    return ckpt_path


def _quadrant_mask(side):
    """Boolean [side, side] mask of the top-left quadrant."""
    mask = np.zeros((side, side), dtype=bool)
    mask[: side // 2, : side // 2] = True
    return mask


def _generate_batched(model, z, pops_norm, batch=25):
    outs = []
    with ad.no_grad():
        for start in range(0, len(z), batch):
            outs.append(model.generate(z[start:start + batch],
                                       pops_norm[start:start + batch]).data)
    return np.concatenate(outs, axis=0)


def evaluate_experiment(ckpt_path, world_dir, seed):
    """Compute the four conditioning criteria against the held-out tiles.

    Returns a dict of raw numbers plus boolean verdicts:
      (a) generated-vs-holdout Fréchet distance drops >= 50% from the
          untrained model's value;
      (b) repopulating the top-left quadrant from dataset-min to
          dataset-max raises that quadrant's builtup_score on >= 80% of
          50 held-out tiles;
      (c) the k=20 population effect map concentrates >= 2x more mean
          absolute change inside the edited quadrant than outside;
      (d) encoder reconstruction beats a random-style generation in
          pixel_distance on >= 90% of 100 held-out tiles.
    """
    manifest, records = load_dataset(world_dir)
    _, holdout = split_holdout(records, HOLDOUT_FRACTION)
    loaded = load_checkpoint(ckpt_path)
    extractor = FeatureExtractor()
    rng = np.random.default_rng(seed + 1000)

    real_images = np.stack([r.image for r in holdout])
    pops_raw = np.stack([r.pop for r in holdout])
    pops_norm = loaded.normalize_pop(pops_raw)

    # (a) Fréchet drop vs the untrained model
    z = rng.standard_normal((len(holdout), loaded.model.cfg.z_dim))
    stats_real = feature_stats(real_images, extractor)
    fake = _generate_batched(loaded.model, z, pops_norm)
    fid_trained = frechet_distance(stats_real, feature_stats(fake, extractor))
    untrained = Model(ModelConfig(), seed=seed)
    fake0 = _generate_batched(untrained, z, pops_norm)
    fid_untrained = frechet_distance(stats_real, feature_stats(fake0, extractor))

    # (b) direction-only built-up response to a quadrant edit
    pop_min = float(min(p.min() for p in pops_raw))
    pop_max = float(max(p.max() for p in pops_raw))
    qmask_pop = _quadrant_mask(pops_raw.shape[-1])
    qmask_img = _quadrant_mask(real_images.shape[-1])
    n_b = min(50, len(holdout))
    raised = 0
    with ad.no_grad():
        for i in range(n_b):
            lo = pops_raw[i].copy()
            hi = pops_raw[i].copy()
            lo[qmask_pop] = pop_min
            hi[qmask_pop] = pop_max
            w = loaded.model.encode(real_images[i][None], pops_norm[i][None])
            img_lo = loaded.model.synthesize(
                w, loaded.normalize_pop(lo)[None]).data[0]
            img_hi = loaded.model.synthesize(
                w, loaded.normalize_pop(hi)[None]).data[0]
            if (builtup_score(img_hi, qmask_img)
                    > builtup_score(img_lo, qmask_img)):
                raised += 1
    raised_fraction = raised / n_b

    # (c) spatial concentration of the population effect
    base = pops_raw[0]
    lo = base.copy()
    hi = base.copy()
    lo[qmask_pop] = pop_min
    hi[qmask_pop] = pop_max
    emap = population_effect_map(loaded.model, loaded.normalize_pop(lo),
                                 loaded.normalize_pop(hi), k_styles=20,
                                 seed=seed)
    mean_inside = float(emap[qmask_img].mean())
    mean_outside = float(emap[~qmask_img].mean())

    # (d) reconstruction beats random-style generation pixel-wise
    n_d = min(100, len(holdout))
    z_rand = rng.standard_normal((n_d, loaded.model.cfg.z_dim))
    wins = 0
    with ad.no_grad():
        for i in range(n_d):
            rec = reconstruct(loaded, real_images[i], pops_norm[i][None])
            rnd = loaded.model.generate(z_rand[i][None],
                                        pops_norm[i][None]).data[0]
            if (pixel_distance(real_images[i], rec)
                    < pixel_distance(real_images[i], rnd)):
                wins += 1
    recon_win_fraction = wins / n_d

    return {
        "seed": seed,
        "fid_untrained": fid_untrained,
        "fid_trained": fid_trained,
        "fid_drop_fraction": 1.0 - fid_trained / fid_untrained,
        "builtup_raised_fraction": raised_fraction,
        "effect_mean_inside": mean_inside,
        "effect_mean_outside": mean_outside,
        "effect_ratio": (mean_inside / mean_outside
                         if mean_outside > 0 else float("inf")),
        "recon_win_fraction": recon_win_fraction,
        "pass_fid": fid_trained <= 0.5 * fid_untrained,
        "pass_builtup": raised_fraction >= 0.8,
        "pass_effect": mean_inside >= 2.0 * mean_outside,
        "pass_recon": recon_win_fraction >= 0.9,
        "wall_minutes": load_checkpoint(ckpt_path).metadata.get("wall_minutes"),
    }


def run_and_evaluate(workdir, seed, progress=None):
    """Run (or resume) the experiment and cache the evaluation verdicts."""
    ckpt = run_experiment(workdir, seed, progress=progress)
    results_path = os.path.join(workdir, "results.json")
    if os.path.exists(results_path):
        with open(results_path) as f:
            return json.load(f)
    results = evaluate_experiment(ckpt, os.path.join(workdir, "world"), seed)
    with open(results_path, "w") as f:
        json.dump(results, f, indent=1, sort_keys=True)
        f.write("\n")
    return results
