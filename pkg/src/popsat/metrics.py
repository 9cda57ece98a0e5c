"""Evaluation suite: feature statistics, Fréchet distance, pixel and
semantic reconstruction distances, distance histograms, and population
effect maps.

The semantic feature space is a fixed seeded random convolutional network
rather than a pretrained classifier, so absolute values are only
comparable between runs of this artifact, never to published numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import ContractError

FEATURE_DIM = 64
_FEATURE_CHANNELS = (16, 32, 64, 64)


class FeatureExtractor:
    """Fixed random conv net: 4 x (conv3x3 + leaky + avgpool2) -> GAP -> 64.

    Weights are generated once from the seed and never trained; the same
    seed regenerates bit-identical features forever.
    """

    def __init__(self, seed=1234):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights = []
        cin = 3
        for cout in _FEATURE_CHANNELS:
            fan = cin * 9
            w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan)
            b = np.zeros(cout)
            self.weights.append((w, b))
            cin = cout

    def features(self, images):
        """[N,3,H,W] or [3,H,W] in [-1,1] -> [N, 64] feature matrix."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        with ad.no_grad():
            x = Tensor(images)
            for w, b in self.weights:
                x = ad.leaky_relu(ad.conv2d(x, Tensor(w), Tensor(b), pad=1), 0.2)
                if x.shape[2] >= 2 and x.shape[3] >= 2:
                    x = ad.avg_pool2(x)
            feats = ad.tmean(x, axis=(2, 3))
        return feats.data


@dataclass
class FeatureStats:
    n: int
    mean: np.ndarray
    cov: np.ndarray


def feature_stats(images, extractor: FeatureExtractor) -> FeatureStats:
    """Mean and unbiased covariance of extractor features."""
    feats = extractor.features(images)
    if feats.shape[0] < 2:
        raise ContractError("feature_stats needs at least 2 images")
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1)
    return FeatureStats(n=feats.shape[0], mean=mean, cov=np.atleast_2d(cov))


def _psd_sqrt(mat, tol=1e-8):
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Squared Fréchet distance between Gaussian fits (the FID convention).

    Matrix square root via symmetric eigendecomposition of
    sqrt(Sa) Sb sqrt(Sa) with negative eigenvalues clamped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ContractError("feature dimension mismatch")
    diff = a.mean - b.mean
    sa_half = _psd_sqrt(a.cov)
    inner = sa_half @ b.cov @ sa_half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov)
              - 2.0 * np.sum(np.sqrt(vals)))
    return max(d, 0.0)


def pixel_distance(a, b) -> float:
    """Euclidean norm of the flattened image difference in [-1,1] space."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("pixel_distance shape mismatch")
    return float(np.linalg.norm((a - b).ravel()))


def semantic_distance(a, b, extractor: FeatureExtractor) -> float:
    """Euclidean distance between feature embeddings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("semantic_distance shape mismatch")
    fa = extractor.features(a[None] if a.ndim == 3 else a)
    fb = extractor.features(b[None] if b.ndim == 3 else b)
    return float(np.linalg.norm(fa - fb))


def population_effect_map(model, pop_a, pop_b, k_styles=20, seed=0,
                          stage=None, alpha=1.0):
    """Mean absolute per-pixel change between pop_a and pop_b generations,
    averaged over k sampled styles and over channels: an [H,W] map."""
    pop_a = np.asarray(pop_a, dtype=np.float64)
    pop_b = np.asarray(pop_b, dtype=np.float64)
    if pop_a.shape != pop_b.shape:
        raise ContractError("population grids must share resolution")
    if k_styles < 1:
        raise ContractError("k_styles must be >= 1")
    rng = np.random.default_rng(seed)
    acc = None
    with ad.no_grad():
        for _ in range(k_styles):
            z = rng.standard_normal((1, model.cfg.z_dim))
            w = model.map_latent(z)
            img_a = model.synthesize(w, pop_a[None], stage, alpha).data[0]
            img_b = model.synthesize(w, pop_b[None], stage, alpha).data[0]
            delta = np.abs(img_a - img_b).mean(axis=0)
            acc = delta if acc is None else acc + delta
    return acc / k_styles


def histogram(values, n_bins):
    """Uniform bins over [min, max]; the max value lands in the last bin.

    A single distinct value degenerates to one populated bin by widening
    the range by 1e-9.  Returns (edges, counts)."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ContractError("histogram needs a non-empty value list")
    if n_bins < 1:
        raise ContractError("n_bins must be >= 1")
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return edges, counts
