"""HTTP facade over the inference pipeline.

JSON in, JSON out; images as base64 PNGs; population grids travel raw
(persons/cell) and are normalized server-side with the checkpoint
constants.  Model access is serialized with a lock so interleaved clients
see answers identical to serialized execution.
"""

from __future__ import annotations

import base64
import threading
import time

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import autodiff as ad
from .dataset import ContractError, FormatError
from .metrics import population_effect_map
from .pipeline import (heatmap_png_bytes, interpolate_styles, load_checkpoint,
                       png_bytes, read_png, repopulate)


class ServiceError(Exception):
    def __init__(self, status, code, message, field=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.field = field


_state = {"loaded": None}
_model_lock = threading.Lock()

app = FastAPI(title="population-conditioned tile service")


def load_model(ckpt_path):
    """Load (or swap) the served checkpoint."""
    loaded = load_checkpoint(ckpt_path)
    with _model_lock:
        _state["loaded"] = loaded
    return loaded


def _loaded():
    loaded = _state["loaded"]
    if loaded is None:
        raise ServiceError(503, "model_not_loaded", "no checkpoint is loaded")
    return loaded


@app.exception_handler(ServiceError)
async def _service_error(request: Request, exc: ServiceError):
    body = {"code": exc.code, "message": str(exc)}
    if exc.field is not None:
        body["field"] = exc.field
    return JSONResponse(status_code=exc.status, content=body)


def _require(body, field):
    if field not in body:
        raise ServiceError(400, "missing_field",
                           f"required field {field!r} missing", field)
    return body[field]


def _parse_grid(value, field):
    """Nested numeric arrays -> [H,W] float grid; raw persons/cell."""
    try:
        grid = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ServiceError(400, "malformed_grid",
                           f"{field} is not a rectangular numeric grid", field)
    if grid.ndim != 2 or grid.size == 0:
        raise ServiceError(400, "malformed_grid",
                           f"{field} must be a non-empty 2-d grid", field)
    if not np.all(np.isfinite(grid)):
        raise ServiceError(400, "malformed_grid",
                           f"{field} contains non-finite values", field)
    if grid.min() < 0:
        raise ServiceError(400, "negative_population",
                           f"{field} contains negative cells", field)
    return grid


def _check_grid_resolution(loaded, grid, field):
    res = loaded.resolution
    h, w = grid.shape
    if h != w or res % h != 0:
        raise ServiceError(
            422, "resolution_mismatch",
            f"{field} is {h}x{w}; needs a square grid whose side divides "
            f"the model resolution {res}", field)
    return grid


def _parse_image(value, loaded, field):
    try:
        img = read_png(base64.b64decode(value))
    except Exception:
        raise ServiceError(400, "malformed_image",
                           f"{field} is not a base64 PNG", field)
    res = loaded.resolution
    if img.shape[1] != res or img.shape[2] != res:
        raise ServiceError(422, "resolution_mismatch",
                           f"{field} must be {res}x{res}", field)
    return img


def _b64png(image):
    return base64.b64encode(png_bytes(image)).decode("ascii")


def _b64(data):
    return base64.b64encode(data).decode("ascii")


async def _json_body(request):
    try:
        return await request.json()
    except Exception:
        raise ServiceError(400, "malformed_body", "request body is not JSON")


@app.get("/healthz")
async def healthz():
    return {"status": "ok", "model_loaded": _state["loaded"] is not None}


@app.get("/api/model")
async def model_info():
    loaded = _loaded()
    return {
        "checkpoint_id": loaded.checkpoint_id,
        "resolution": loaded.resolution,
        "config": loaded.model.cfg.to_dict(),
        "pop_log_min": loaded.pop_log_min,
        "pop_log_max": loaded.pop_log_max,
    }


@app.post("/api/generate")
async def generate(request: Request):
    body = await _json_body(request)
    loaded = _loaded()
    pop = _check_grid_resolution(
        loaded, _parse_grid(_require(body, "pop"), "pop"), "pop")
    t0 = time.monotonic()
    with _model_lock:
        if "style" in body:
            w = np.asarray(body["style"], dtype=np.float64)
            if w.shape != (loaded.model.cfg.w_dim,):
                raise ServiceError(400, "malformed_style",
                                   f"style must have {loaded.model.cfg.w_dim}"
                                   " entries", "style")
        else:
            seed = int(body.get("seed", 0))
            z = np.random.default_rng(seed).standard_normal(
                (1, loaded.model.cfg.z_dim))
            with ad.no_grad():
                w = loaded.model.map_latent(z).data[0]
        with ad.no_grad():
            img = loaded.model.synthesize(
                w[None], loaded.normalize_pop(pop)[None],
                loaded.stage, loaded.alpha).data[0]
    return {
        "png": _b64png(img),
        "style": w.tolist(),
        "checkpoint_id": loaded.checkpoint_id,
        "timing_ms": round((time.monotonic() - t0) * 1000.0, 3),
    }


@app.post("/api/reconstruct")
async def reconstruct_endpoint(request: Request):
    body = await _json_body(request)
    loaded = _loaded()
    img = _parse_image(_require(body, "image"), loaded, "image")
    pop = _check_grid_resolution(
        loaded, _parse_grid(_require(body, "pop"), "pop"), "pop")
    t0 = time.monotonic()
    with _model_lock:
        with ad.no_grad():
            w = loaded.model.encode(img[None], loaded.normalize_pop(pop)[None],
                                    loaded.stage, loaded.alpha)
            out = loaded.model.synthesize(
                w, loaded.normalize_pop(pop)[None],
                loaded.stage, loaded.alpha).data[0]
    return {
        "png": _b64png(out),
        "style": w.data[0].tolist(),
        "checkpoint_id": loaded.checkpoint_id,
        "timing_ms": round((time.monotonic() - t0) * 1000.0, 3),
    }


@app.post("/api/repopulate")
async def repopulate_endpoint(request: Request):
    body = await _json_body(request)
    loaded = _loaded()
    img = _parse_image(_require(body, "image"), loaded, "image")
    pop_orig = _parse_grid(_require(body, "pop_orig"), "pop_orig")
    pop_new = _parse_grid(_require(body, "pop_new"), "pop_new")
    if pop_orig.shape != pop_new.shape:
        raise ServiceError(422, "resolution_mismatch",
                           f"pop_new is {pop_new.shape[0]}x{pop_new.shape[1]}"
                           f" but pop_orig is {pop_orig.shape[0]}x"
                           f"{pop_orig.shape[1]}", "pop_new")
    _check_grid_resolution(loaded, pop_orig, "pop_orig")
    t0 = time.monotonic()
    with _model_lock:
        out = repopulate(loaded, img, loaded.normalize_pop(pop_orig)[None],
                         loaded.normalize_pop(pop_new)[None])
        base = repopulate(loaded, img, loaded.normalize_pop(pop_orig)[None],
                          loaded.normalize_pop(pop_orig)[None])
    delta = np.abs(out - base).mean(axis=0)
    return {
        "png": _b64png(out),
        "pixel_delta_png": _b64(heatmap_png_bytes(delta)),
        "checkpoint_id": loaded.checkpoint_id,
        "timing_ms": round((time.monotonic() - t0) * 1000.0, 3),
    }


@app.post("/api/effect-map")
async def effect_map(request: Request):
    body = await _json_body(request)
    loaded = _loaded()
    pop_a = _check_grid_resolution(
        loaded, _parse_grid(_require(body, "pop_a"), "pop_a"), "pop_a")
    pop_b = _parse_grid(_require(body, "pop_b"), "pop_b")
    if pop_a.shape != pop_b.shape:
        raise ServiceError(422, "resolution_mismatch",
                           f"pop_b is {pop_b.shape[0]}x{pop_b.shape[1]} but "
                           f"pop_a is {pop_a.shape[0]}x{pop_a.shape[1]}",
                           "pop_b")
    k = int(body.get("k_styles", 20))
    if k < 1:
        raise ServiceError(400, "malformed_field",
                           "k_styles must be >= 1", "k_styles")
    seed = int(body.get("seed", 0))
    t0 = time.monotonic()
    with _model_lock:
        emap = population_effect_map(
            loaded.model, loaded.normalize_pop(pop_a),
            loaded.normalize_pop(pop_b), k_styles=k, seed=seed,
            stage=loaded.stage, alpha=loaded.alpha)
    # stats against the cells the edit actually touched, in image space
    changed = pop_a != pop_b
    scale = emap.shape[0] // pop_a.shape[0]
    changed_img = np.kron(changed, np.ones((scale, scale), dtype=bool))
    if changed_img.any() and not changed_img.all():
        mean_inside = float(emap[changed_img].mean())
        mean_outside = float(emap[~changed_img].mean())
    elif changed_img.all():
        mean_inside, mean_outside = float(emap.mean()), 0.0
    else:
        mean_inside, mean_outside = 0.0, 0.0
    return {
        "heatmap_png": _b64(heatmap_png_bytes(emap)),
        "stats": {"mean_inside": mean_inside, "mean_outside": mean_outside},
        "checkpoint_id": loaded.checkpoint_id,
        "timing_ms": round((time.monotonic() - t0) * 1000.0, 3),
    }


@app.post("/api/interpolate")
async def interpolate(request: Request):
    body = await _json_body(request)
    loaded = _loaded()
    w_dim = loaded.model.cfg.w_dim
    styles = []
    for field in ("style_a", "style_b"):
        w = np.asarray(_require(body, field), dtype=np.float64)
        if w.shape != (w_dim,):
            raise ServiceError(400, "malformed_style",
                               f"{field} must have {w_dim} entries", field)
        styles.append(w)
    t = body.get("t", 0.5)
    try:
        t = float(t)
    except (TypeError, ValueError):
        raise ServiceError(400, "malformed_field", "t must be a number", "t")
    mode = body.get("mode", "linear")
    pop = _check_grid_resolution(
        loaded, _parse_grid(_require(body, "pop"), "pop"), "pop")
    t0 = time.monotonic()
    try:
        w = interpolate_styles(styles[0], styles[1], t, mode)
    except ContractError as e:
        raise ServiceError(400, "malformed_field", str(e), "t")
    with _model_lock:
        with ad.no_grad():
            img = loaded.model.synthesize(
                w[None], loaded.normalize_pop(pop)[None],
                loaded.stage, loaded.alpha).data[0]
    return {
        "png": _b64png(img),
        "style": w.tolist(),
        "checkpoint_id": loaded.checkpoint_id,
        "timing_ms": round((time.monotonic() - t0) * 1000.0, 3),
    }
