"""Tile records, population normalization, grid resampling and the
procedural synthetic world used for training and conditioning tests.

Record file layout (.scr, little-endian):
    magic "SCR1" | u32 R | u32 R_p | 3*R*R f32 image (channel-major)
    | R_p*R_p f32 raw population | u16 id length | UTF-8 tile id
    | u32 CRC-32 of all preceding bytes
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np


class ContractError(ValueError):
    """Caller violated an operation precondition."""


class FormatError(ValueError):
    """A file on disk does not parse as the expected format."""


class ValidationError(ValueError):
    """Parsed data violates a record invariant."""


MAGIC = b"SCR1"

# Built-up pixel classifier defaults, tuned to the synthetic palette.
# They are dataset parameters (recorded in the manifest), not universal.
BUILTUP_SATURATION_MAX = 0.15
BUILTUP_LUMA_LO = -0.3
BUILTUP_LUMA_HI = 0.6


@dataclass
class TileRecord:
    image: np.ndarray  # [3, R, R] float in [-1, 1]
    pop: np.ndarray    # [R_p, R_p] raw persons per cell, >= 0
    tile_id: str

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValidationError("image must be [3, R, R]")
        if self.image.shape[1] != self.image.shape[2]:
            raise ValidationError("image must be square")
        if self.pop.ndim != 2 or self.pop.shape[0] != self.pop.shape[1]:
            raise ValidationError("pop must be a square grid")
        if self.pop.shape[0] > self.image.shape[1]:
            raise ValidationError("pop resolution exceeds image resolution")
        if np.any(self.image < -1.0) or np.any(self.image > 1.0):
            raise ValidationError("image values outside [-1, 1]")
        if np.any(self.pop < 0.0):
            raise ValidationError("negative population cell")


@dataclass
class DatasetManifest:
    records: list[str]
    full_resolution: int
    pop_resolution: int
    pop_log_min: float
    pop_log_max: float
    seed: int | None = None
    builtup: dict = field(default_factory=lambda: {
        "saturation_max": BUILTUP_SATURATION_MAX,
        "luma_lo": BUILTUP_LUMA_LO,
        "luma_hi": BUILTUP_LUMA_HI,
    })

    def save(self, path):
        with open(path, "w") as f:
            json.dump({
                "records": self.records,
                "full_resolution": self.full_resolution,
                "pop_resolution": self.pop_resolution,
                "pop_log_min": self.pop_log_min,
                "pop_log_max": self.pop_log_max,
                "seed": self.seed,
                "builtup": self.builtup,
            }, f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                d = json.load(f)
            m = cls(records=d["records"], full_resolution=d["full_resolution"],
                    pop_resolution=d["pop_resolution"],
                    pop_log_min=d["pop_log_min"], pop_log_max=d["pop_log_max"],
                    seed=d.get("seed"), builtup=d.get("builtup"))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"bad manifest {path}: {e}") from e
        if not m.pop_log_min < m.pop_log_max:
            raise ValidationError("manifest has pop_log_min >= pop_log_max")
        base = os.path.dirname(os.path.abspath(path))
        missing = [r for r in m.records
                   if not os.path.exists(os.path.join(base, r))]
        if missing:
            raise ValidationError(f"manifest lists missing records: {missing[:3]}")
        return m


# -- population scaling ----------------------------------------------------

def normalize_population(raw, pop_log_min, pop_log_max):
    """log(1+p) min-max scaled to [-1, 1] with dataset-level constants."""
    if not pop_log_max > pop_log_min:
        raise ContractError("pop_log_max must exceed pop_log_min")
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ContractError("raw population must be non-negative")
    n = 2.0 * (np.log1p(raw) - pop_log_min) / (pop_log_max - pop_log_min) - 1.0
    return np.clip(n, -1.0, 1.0)


def denormalize_population(n, pop_log_min, pop_log_max):
    if not pop_log_max > pop_log_min:
        raise ContractError("pop_log_max must exceed pop_log_min")
    n = np.asarray(n, dtype=np.float64)
    return np.expm1((n + 1.0) / 2.0 * (pop_log_max - pop_log_min) + pop_log_min)


# -- resampling ------------------------------------------------------------

def resample_grid(grid, target_shape):
    """Integer-ratio resampling: area average down, nearest-neighbor up.

    Works on the trailing two axes, so batched [..., H, W] arrays pass
    through unchanged on their leading axes.
    """
    grid = np.asarray(grid, dtype=np.float64)
    th, tw = target_shape
    h, w = grid.shape[-2], grid.shape[-1]
    out = grid
    if th == h and tw == w:
        return out.copy()
    if th <= h:
        if h % th or w % tw:
            raise ContractError(f"non-integer downsample ratio {h}x{w} -> {th}x{tw}")
        fh, fw = h // th, w // tw
        out = out.reshape(*out.shape[:-2], th, fh, tw, fw).mean(axis=(-3, -1))
    else:
        if th % h or tw % w:
            raise ContractError(f"non-integer upsample ratio {h}x{w} -> {th}x{tw}")
        out = np.repeat(np.repeat(out, th // h, axis=-2), tw // w, axis=-1)
    return out


# -- record I/O ------------------------------------------------------------

def write_record(record: TileRecord, path):
    record.validate()
    img = np.ascontiguousarray(record.image, dtype="<f4")
    pop = np.ascontiguousarray(record.pop, dtype="<f4")
    tid = record.tile_id.encode("utf-8")
    if len(tid) > 0xFFFF:
        raise ValidationError("tile_id too long")
    body = b"".join([
        MAGIC,
        struct.pack("<II", record.image.shape[1], record.pop.shape[0]),
        img.tobytes(),
        pop.tobytes(),
        struct.pack("<H", len(tid)),
        tid,
    ])
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_record(path) -> TileRecord:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a tile record (bad magic)")
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise FormatError(f"{path}: checksum mismatch (corrupted record)")
    blob = blob[:-4]
    r, rp = struct.unpack_from("<II", blob, 4)
    if r == 0 or rp == 0 or r > 1 << 16 or rp > 1 << 16:
        raise FormatError(f"{path}: implausible resolutions {r}, {rp}")
    off = 12
    img_bytes = 3 * r * r * 4
    pop_bytes = rp * rp * 4
    if len(blob) < off + img_bytes + pop_bytes + 2:
        raise FormatError(f"{path}: truncated record")
    img = np.frombuffer(blob, dtype="<f4", count=3 * r * r, offset=off)
    off += img_bytes
    pop = np.frombuffer(blob, dtype="<f4", count=rp * rp, offset=off)
    off += pop_bytes
    (tid_len,) = struct.unpack_from("<H", blob, off)
    off += 2
    if len(blob) != off + tid_len:
        raise FormatError(f"{path}: trailing or missing bytes")
    try:
        tid = blob[off:off + tid_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: tile_id not UTF-8") from e
    rec = TileRecord(image=img.reshape(3, r, r).astype(np.float64),
                     pop=pop.reshape(rp, rp).astype(np.float64),
                     tile_id=tid)
    rec.validate()
    return rec


# -- built-up pixel oracle -------------------------------------------------

def builtup_score(image, mask=None, saturation_max=BUILTUP_SATURATION_MAX,
                  luma_lo=BUILTUP_LUMA_LO, luma_hi=BUILTUP_LUMA_HI):
    """Fraction of masked pixels classified gray/built-up.

    A pixel counts when its channel spread is below `saturation_max` and
    its luminance sits in [luma_lo, luma_hi], all in [-1, 1] space.
    """
    image = np.asarray(image, dtype=np.float64)
    if mask is None:
        mask = np.ones(image.shape[1:], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("empty mask")
    spread = image.max(axis=0) - image.min(axis=0)
    luma = image.mean(axis=0)
    hit = (spread < saturation_max) & (luma >= luma_lo) & (luma <= luma_hi)
    return float(hit[mask].mean())


# -- synthetic world -------------------------------------------------------

def _value_noise(rng, res, octaves=4, decay=0.35):
    """Smooth multi-octave noise in [0, 1] at res x res.

    The coarse octaves dominate (decay < 0.5): tiles are mostly large
    contiguous landforms with mild fine texture, like real low-resolution
    satellite imagery."""
    acc = np.zeros((res, res))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = min(res, 2 ** (o + 2))
        coarse = rng.random((cells, cells))
        if cells < res:
            # bilinear upsample of the coarse lattice
            xi = np.linspace(0, cells - 1, res)
            x0 = np.floor(xi).astype(int)
            x1 = np.minimum(x0 + 1, cells - 1)
            fx = xi - x0
            top = coarse[x0][:, x0] * (1 - fx[None, :]) + coarse[x0][:, x1] * fx[None, :]
            bot = coarse[x1][:, x0] * (1 - fx[None, :]) + coarse[x1][:, x1] * fx[None, :]
            layer = top * (1 - fx[:, None]) + bot * fx[:, None]
        else:
            layer = coarse
        acc += amp * layer
        total += amp
        amp *= decay
    return acc / total


# Reference scale for the built-up Bernoulli: peak blob amplitude.
_POP_PEAK = 5000.0


def _tile_from_rng(rng, resolution, pop_resolution):
    """One synthetic tile: blobby population + terrain with gray built-up."""
    rp = pop_resolution
    yy, xx = np.mgrid[0:rp, 0:rp].astype(np.float64)
    pop = np.zeros((rp, rp))
    for _ in range(int(rng.integers(0, 5))):
        cy, cx = rng.uniform(0, rp, size=2)
        sigma = rng.uniform(rp / 16, rp / 3)
        peak = rng.uniform(10.0, _POP_PEAK)
        pop += peak * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2)
                               / (2 * sigma ** 2)))

    terrain = _value_noise(rng, resolution)
    # green-to-brown palette, saturated by construction; the vegetation
    # amplitude varies per tile (biome/season), a global appearance factor
    veg = rng.uniform(0.25, 0.75)
    g = np.clip(0.15 + veg * terrain, 0.0, 0.9)
    r = np.clip(0.05 + 0.55 * (1.0 - terrain), 0.0, 0.9)
    b = np.full_like(terrain, 0.04)
    image = np.stack([r, g, b]) * 2.0 - 1.0

    # built-up overpaint: coverage monotone in log population.  Placement
    # thresholds a smooth siting field instead of iid per-pixel noise, so
    # settlements are contiguous blobs (as in real imagery) rather than
    # salt-and-pepper speckle.
    pop_px = resample_grid(pop, (resolution, resolution))
    level = np.log1p(pop_px) / np.log1p(_POP_PEAK)
    prob = np.clip(0.02 + 0.95 * level, 0.0, 0.97)
    siting = _value_noise(rng, resolution, octaves=2)
    built = siting < prob
    gray = 0.1 + 0.25 * terrain  # luma around 0.1..0.35, low spread
    jitter = rng.uniform(-0.02, 0.02, size=(3, resolution, resolution))
    gray_rgb = np.clip(gray[None] + jitter, -1.0, 1.0)
    image = np.where(built[None], gray_rgb, image)

    # per-tile global lighting/tint (seasonal/atmospheric variation): a
    # whole-image factor a global style vector can represent.  Bounded so
    # gray pixels keep channel spread < 0.15 and luma within the built-up
    # classifier window.
    luma_shift = rng.uniform(-0.2, 0.2)
    tint_r = rng.uniform(-0.04, 0.04)
    tint_g = rng.uniform(-0.04, 0.04)
    image = image + np.array([luma_shift + tint_r, luma_shift + tint_g,
                              luma_shift])[:, None, None]
    image = np.clip(image, -1.0, 1.0)

    # quantize to the f32 storage grid so round-trips are bit-exact
    image = image.astype(np.float32).astype(np.float64)
    pop = pop.astype(np.float32).astype(np.float64)
    return image, pop


def synthesize_world(seed, n_tiles, resolution, out_dir,
                     pop_resolution=None, min_correlation=0.5):
    """Generate a deterministic paired image/population dataset on disk.

    Fails (without writing a manifest) if the built-up/population Pearson
    correlation over the emitted tiles falls below `min_correlation`.
    """
    if n_tiles < 1:
        raise ContractError("n_tiles must be >= 1")
    if resolution < 32 or resolution & (resolution - 1):
        raise ContractError("resolution must be a power of two >= 32")
    if pop_resolution is None:
        pop_resolution = resolution // 2
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths, pops, scores = [], [], []
    for i in range(n_tiles):
        image, pop = _tile_from_rng(rng, resolution, pop_resolution)
        tid = f"tile{i:05d}"
        rec = TileRecord(image=image, pop=pop, tile_id=tid)
        name = tid + ".scr"
        write_record(rec, os.path.join(out_dir, name))
        paths.append(name)
        pops.append(pop)
        f = resolution // pop_resolution
        spread = image.max(axis=0) - image.min(axis=0)
        luma = image.mean(axis=0)
        hit = ((spread < BUILTUP_SATURATION_MAX)
               & (luma >= BUILTUP_LUMA_LO) & (luma <= BUILTUP_LUMA_HI))
        scores.append(resample_grid(hit.astype(np.float64),
                                    (pop_resolution, pop_resolution)))

    allpop = np.stack(pops)
    lo = float(np.log1p(allpop.min()))
    hi = float(np.log1p(allpop.max()))
    if not hi > lo:
        hi = lo + 1e-6
    norm = normalize_population(allpop, lo, hi)
    # the correlation self-check is vacuous without population variance
    # (tiny worlds can draw zero settlement blobs everywhere)
    if norm.std() > 1e-12:
        corr = float(np.corrcoef(norm.ravel(), np.stack(scores).ravel())[0, 1])
        if not corr >= min_correlation:
            raise ValidationError(
                f"world self-check failed: built-up/pop correlation {corr:.3f}"
                f" < {min_correlation}")

    manifest = DatasetManifest(records=paths, full_resolution=resolution,
                               pop_resolution=pop_resolution,
                               pop_log_min=lo, pop_log_max=hi, seed=seed)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def load_dataset(data_dir):
    """Load manifest plus all records (in manifest order)."""
    manifest = DatasetManifest.load(os.path.join(data_dir, "manifest.json"))
    records = [load_record(os.path.join(data_dir, r)) for r in manifest.records]
    return manifest, records


def split_holdout(records, fraction=0.1):
    """Deterministic train/held-out split: the trailing fraction is held out."""
    n_hold = max(1, int(round(len(records) * fraction)))
    if n_hold >= len(records):
        raise ContractError("dataset too small to split")
    return records[:-n_hold], records[-n_hold:]
