"""Checkpoint persistence and the user-facing generation workflows.

Checkpoint layout (.sck, little-endian):
    magic "SCK1" | u32 version | u64 header length | JSON header
    | raw float64 tensor payload
The JSON header carries the model configuration, growth state, population
normalization constants, creation metadata, and a tensor directory with
byte offsets into the payload.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np
from PIL import Image

from . import autodiff as ad
from .dataset import ContractError, FormatError, normalize_population
from .model import Model, ModelConfig

CKPT_MAGIC = b"SCK1"
CKPT_VERSION = 1


class UnsupportedVersionError(FormatError):
    pass


def save_checkpoint(model: Model, path, pop_log_min, pop_log_max,
                    stage=None, alpha=1.0, metadata=None):
    if stage is None:
        stage = model.cfg.max_stage
    names = sorted(model.params)
    directory = {}
    offset = 0
    payload = []
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        directory[name] = {"shape": list(arr.shape), "offset": offset}
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": model.cfg.to_dict(),
        "growth": {"stage": stage, "alpha": alpha},
        "pop_log_min": pop_log_min,
        "pop_log_max": pop_log_max,
        "metadata": metadata or {},
        "tensors": directory,
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for chunk in payload:
            f.write(chunk)


class LoadedModel:
    """A model restored from a checkpoint plus its inference context."""

    def __init__(self, model, stage, alpha, pop_log_min, pop_log_max,
                 checkpoint_id, metadata):
        self.model = model
        self.stage = stage
        self.alpha = alpha
        self.pop_log_min = pop_log_min
        self.pop_log_max = pop_log_max
        self.checkpoint_id = checkpoint_id
        self.metadata = metadata

    @property
    def resolution(self):
        return self.model.cfg.resolution(self.stage)

    def normalize_pop(self, raw):
        return normalize_population(raw, self.pop_log_min, self.pop_log_max)


def load_checkpoint(path) -> LoadedModel:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint version {version}, supported {CKPT_VERSION}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if 16 + hlen > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        growth = header["growth"]
        directory = header["tensors"]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad checkpoint header: {e}") from e

    model = Model(cfg, seed=0)
    base = 16 + hlen
    if set(directory) != set(model.params):
        missing = set(model.params) - set(directory)
        extra = set(directory) - set(model.params)
        raise FormatError(
            f"{path}: tensor directory mismatch (missing {sorted(missing)[:3]},"
            f" extra {sorted(extra)[:3]})")
    for name, entry in directory.items():
        shape = tuple(entry["shape"])
        if shape != model.params[name].shape:
            raise FormatError(f"{path}: tensor {name} has shape {shape}")
        count = int(np.prod(shape)) if shape else 1
        off = base + entry["offset"]
        if off + count * 8 > len(blob):
            raise FormatError(f"{path}: truncated tensor payload for {name}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        model.params[name].data = arr.reshape(shape).astype(np.float64)
    ckpt_id = hashlib.sha256(blob).hexdigest()[:16]
    return LoadedModel(model=model, stage=int(growth["stage"]),
                       alpha=float(growth["alpha"]),
                       pop_log_min=float(header["pop_log_min"]),
                       pop_log_max=float(header["pop_log_max"]),
                       checkpoint_id=ckpt_id,
                       metadata=header.get("metadata", {}))


# -- workflows -------------------------------------------------------------

def reconstruct(loaded: LoadedModel, image, pop_norm):
    """One encoder pass then regeneration: synthesize(encode(x, pop), pop)."""
    m = loaded.model
    res = loaded.resolution
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    if single:
        image = image[None]
    if image.shape[2] != res or image.shape[3] != res:
        raise ContractError(f"image must be at model resolution {res}")
    with ad.no_grad():
        w = m.encode(image, pop_norm, loaded.stage, loaded.alpha)
        out = m.synthesize(w, pop_norm, loaded.stage, loaded.alpha).data
    return out[0] if single else out


def repopulate(loaded: LoadedModel, image, pop_orig_norm, pop_new_norm):
    """Style extracted with the original population, imagery regenerated
    under the new one."""
    m = loaded.model
    res = loaded.resolution
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    if single:
        image = image[None]
    a = np.asarray(pop_orig_norm)
    b = np.asarray(pop_new_norm)
    if a.shape[-2:] != b.shape[-2:]:
        raise ContractError("population grids must share resolution")
    if image.shape[2] != res or image.shape[3] != res:
        raise ContractError(f"image must be at model resolution {res}")
    with ad.no_grad():
        w = m.encode(image, pop_orig_norm, loaded.stage, loaded.alpha)
        out = m.synthesize(w, pop_new_norm, loaded.stage, loaded.alpha).data
    return out[0] if single else out


def interpolate_styles(w1, w2, t, mode="linear"):
    """Linear or spherical interpolation between two style vectors."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.shape != w2.shape:
        raise ContractError("style vectors must share dimension")
    if not 0.0 <= t <= 1.0:
        raise ContractError("t must be in [0, 1]")
    if mode == "linear":
        return (1.0 - t) * w1 + t * w2
    if mode != "spherical":
        raise ContractError(f"unknown interpolation mode {mode!r}")
    n1, n2 = np.linalg.norm(w1), np.linalg.norm(w2)
    if n1 == 0.0 or n2 == 0.0:
        raise ContractError("spherical interpolation needs nonzero vectors")
    u1, u2 = w1 / n1, w2 / n2
    dot = float(np.clip(u1 @ u2, -1.0, 1.0))
    omega = np.arccos(dot)
    if omega < 1e-12:
        direction = u1
    else:
        direction = (np.sin((1.0 - t) * omega) * u1
                     + np.sin(t * omega) * u2) / np.sin(omega)
    radius = (1.0 - t) * n1 + t * n2
    return radius * direction


# -- image export ----------------------------------------------------------

def to_uint8(image):
    """[3,H,W] in [-1,1] -> [H,W,3] uint8 with clamping."""
    image = np.asarray(image, dtype=np.float64)
    arr = np.clip((image + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr):
    """[H,W,3] uint8 -> [3,H,W] in [-1,1]."""
    arr = np.asarray(arr, dtype=np.float64)
    return (arr.transpose(2, 0, 1) / 127.5) - 1.0


def write_png(image, path):
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def png_bytes(image):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return buf.getvalue()


def read_png(source):
    """Path or bytes -> [3,H,W] float image in [-1,1]."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(bytes(source))
    with Image.open(source) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def heatmap_png_bytes(values, max_normalize=True):
    """Non-negative [H,W] map -> grayscale PNG bytes (max-normalized)."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if max_normalize else 1.0
    if peak <= 0:
        arr = np.zeros_like(values)
    else:
        arr = values / peak
    gray = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(gray, mode="L").save(buf, format="PNG")
    return buf.getvalue()
