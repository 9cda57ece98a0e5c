"""Three-step adversarial/reciprocity training with progressive growing.

Per batch: a discriminator step (non-saturating loss plus R1 gradient
penalty, updating encoder+head only), a generator step (updating
mapper+synthesis+modulation only), and a latent reciprocity step that
pulls encode(synthesize(w)) back to w (updating synthesis+modulation+
encoder only).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .dataset import ContractError, normalize_population, resample_grid
from .model import Model


class TrainingError(RuntimeError):
    """Training aborted (NaN loss or invalid configuration)."""


def _tune_allocator():
    """Raise glibc's mmap/trim thresholds so the large scratch arrays the
    training loop churns through are recycled on the heap instead of being
    returned to the kernel (page-fault cost) after every free.  Best-effort;
    silently does nothing on non-glibc platforms."""
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except Exception:
        pass


@dataclass
class TrainConfig:
    epochs_per_stage: int = 16
    total_epochs: int = 64
    base_lr: float = 0.002
    batch_size: int = 16
    r1_gamma: float = 10.0
    alpha_ramp_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.total_epochs < self.epochs_per_stage:
            raise ContractError("total_epochs must be >= epochs_per_stage")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2")
        if not 0.0 < self.alpha_ramp_fraction <= 1.0:
            raise ContractError("alpha_ramp_fraction must be in (0, 1]")


@dataclass
class GrowthState:
    stage: int
    alpha: float


def growth_schedule(epoch, cfg: TrainConfig, max_stage) -> GrowthState:
    """Stage switches every epochs_per_stage; alpha ramps linearly over the
    first alpha_ramp_fraction of each grown stage."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    stage = min(epoch // cfg.epochs_per_stage, max_stage)
    if stage == 0:
        return GrowthState(stage=0, alpha=1.0)
    progress = epoch - stage * cfg.epochs_per_stage
    ramp = cfg.alpha_ramp_fraction * cfg.epochs_per_stage
    alpha = min(1.0, progress / ramp)
    if epoch // cfg.epochs_per_stage > max_stage:
        alpha = 1.0
    return GrowthState(stage=stage, alpha=alpha)


def _mean_softplus(x):
    return ad.tmean(ad.softplus(x))


class Trainer:
    def __init__(self, model: Model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        betas = (0.0, 0.99)  # StyleGAN-family convention
        self.opt_d = Adam(model.group_params("encoder", "head"),
                          cfg.base_lr, *betas)
        self.opt_g = Adam(model.group_params("mapper", "synth", "mod"),
                          cfg.base_lr, *betas)
        self.opt_r = Adam(model.group_params("synth", "mod", "encoder"),
                          cfg.base_lr, *betas)

    def _sample_z(self, n):
        return self.rng.standard_normal((n, self.model.cfg.z_dim))

    def _check_finite(self, loss, what):
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite {what} loss")

    def d_step(self, images, pops, growth: GrowthState):
        """Returns (adversarial_loss, r1) as floats; updates encoder+head."""
        m = self.model
        with ad.no_grad():
            fake = m.generate(self._sample_z(len(images)), pops,
                              growth.stage, growth.alpha)
        x_real = Tensor(images, requires_grad=True)
        logit_real = m.discriminate(x_real, pops, growth.stage, growth.alpha)
        logit_fake = m.discriminate(Tensor(fake.data), pops,
                                    growth.stage, growth.alpha)
        loss_adv = ad.add(_mean_softplus(ad.neg(logit_real)),
                          _mean_softplus(logit_fake))
        if self.cfg.r1_gamma > 0.0:
            r1 = ad.tmean(ad.grad_norm_sq(logit_real, x_real))
            loss = ad.add(loss_adv, ad.mul(
                Tensor(np.float64(self.cfg.r1_gamma / 2.0)), r1))
        else:
            r1 = Tensor(np.float64(0.0))
            loss = loss_adv
        self._check_finite(loss, "discriminator")
        ad.backward(loss)
        self.opt_d.step()
        m.zero_grads()
        return float(loss_adv.data), float(r1.data)

    def g_step(self, pops, growth: GrowthState):
        """Non-saturating generator loss; updates mapper+synth+mod."""
        m = self.model
        # discriminator weights are spectators here; freezing them skips
        # their (discarded) weight-gradient convolutions
        with ad.frozen(m.group_params("encoder", "head")):
            fake = m.generate(self._sample_z(len(pops)), pops,
                              growth.stage, growth.alpha)
            logit = m.discriminate(fake, pops, growth.stage, growth.alpha)
            loss = _mean_softplus(ad.neg(logit))
            self._check_finite(loss, "generator")
            ad.backward(loss)
        self.opt_g.step()
        m.zero_grads()
        return float(loss.data)

    def reciprocity_step(self, pops, growth: GrowthState):
        """Latent round-trip loss ||w - E(G(w))||^2; updates synth+mod+encoder."""
        m = self.model
        with ad.no_grad():
            w = m.map_latent(self._sample_z(len(pops)))
        w = Tensor(w.data)  # mapper stays fixed in this step
        img = m.synthesize(w, pops, growth.stage, growth.alpha)
        w_back = m.encode(img, pops, growth.stage, growth.alpha)
        diff = ad.sub(w, w_back)
        loss = ad.tmean(ad.tsum(ad.mul(diff, diff), axis=1))
        self._check_finite(loss, "reciprocity")
        ad.backward(loss)
        self.opt_r.step()
        m.zero_grads()
        return float(loss.data)


def resample_batch(images, pops_raw, resolution, manifest):
    """Images area-averaged to `resolution`; raw pops normalized with the
    manifest constants (the model resamples pop grids itself)."""
    imgs = resample_grid(images, (resolution, resolution))
    pops = normalize_population(pops_raw, manifest.pop_log_min,
                                manifest.pop_log_max)
    return imgs, pops


def train(model: Model, records, manifest, cfg: TrainConfig,
          log_path=None, progress=None):
    """Full training loop; returns the per-epoch metrics rows.

    `records` is a list of TileRecords at full resolution.  On a NaN abort
    the model keeps the parameters from the end of the last good epoch and
    a TrainingError is raised.
    """
    if not records:
        raise TrainingError("empty dataset")
    _tune_allocator()
    res_full = records[0].image.shape[1]
    if any(r.image.shape[1] != res_full for r in records):
        raise TrainingError("all tiles must share full resolution")

    images = np.stack([r.image for r in records])
    pops = np.stack([r.pop for r in records])
    trainer = Trainer(model, cfg)
    order_rng = np.random.default_rng(cfg.seed + 1)
    rows = []
    last_good = {k: p.data.copy() for k, p in model.params.items()}
    writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "stage", "alpha", "loss_d", "loss_g",
                         "loss_r", "r1", "wall_seconds"])
    try:
        for epoch in range(cfg.total_epochs):
            t0 = time.monotonic()
            growth = growth_schedule(epoch, cfg, model.cfg.max_stage)
            res = model.cfg.resolution(growth.stage)
            idx = order_rng.permutation(len(records))
            sums = np.zeros(4)
            n_batches = 0
            for start in range(0, len(idx) - cfg.batch_size + 1,
                               cfg.batch_size):
                sel = idx[start:start + cfg.batch_size]
                bi, bp = resample_batch(images[sel], pops[sel], res, manifest)
                try:
                    loss_d, r1 = trainer.d_step(bi, bp, growth)
                    loss_g = trainer.g_step(bp, growth)
                    loss_r = trainer.reciprocity_step(bp, growth)
                except (ad.AutodiffError, TrainingError) as e:
                    for k, p in model.params.items():
                        p.data = last_good[k].copy()
                    raise TrainingError(f"epoch {epoch}: {e}") from e
                sums += (loss_d, loss_g, loss_r, r1)
                n_batches += 1
            mean = sums / max(n_batches, 1)
            row = {"epoch": epoch, "stage": growth.stage,
                   "alpha": growth.alpha, "loss_d": mean[0],
                   "loss_g": mean[1], "loss_r": mean[2], "r1": mean[3],
                   "wall_seconds": time.monotonic() - t0}
            rows.append(row)
            if writer is not None:
                writer.writerow([row["epoch"], row["stage"],
                                 f"{row['alpha']:.6f}", f"{row['loss_d']:.6f}",
                                 f"{row['loss_g']:.6f}", f"{row['loss_r']:.6f}",
                                 f"{row['r1']:.6f}",
                                 f"{row['wall_seconds']:.3f}"])
                log_file.flush()
            last_good = {k: p.data.copy() for k, p in model.params.items()}
            if progress is not None:
                progress(row)
    finally:
        if writer is not None:
            log_file.close()
    return rows
