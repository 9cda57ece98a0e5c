"""Reverse-mode automatic differentiation on float64 numpy arrays.

The operator set is deliberately closed: exactly what the networks in this
package need (conv, linear, leaky-ReLU, up/down-sampling, instance statistics,
concat, reshape, reductions, softplus, elementwise arithmetic).  Every
backward rule is itself expressed with these operators, so gradients of
gradients (needed for the discriminator gradient penalty) come for free.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(ValueError):
    """Contract violation inside the differentiation engine."""


class DimensionError(AutodiffError):
    """Tensor arguments have incompatible shapes."""


_grad_enabled = [True]


class no_grad:
    """Context manager: operations inside are not recorded on the tape."""

    def __enter__(self):
        self._prev = _grad_enabled[0]
        _grad_enabled[0] = False
        return self

    def __exit__(self, *exc):
        _grad_enabled[0] = self._prev
        return False


class frozen:
    """Context manager: the given leaf tensors receive no gradients.

    Gradients still flow *through* operations that consume them, but the
    per-input adjoint work for the frozen leaves is skipped.  Must span
    both the forward pass and the corresponding backward call.
    """

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self._prev = [(p._track, p.requires_grad) for p in self.params]
        for p in self.params:
            p._track = False
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, (track, req) in zip(self.params, self._prev):
            p._track = track
            p.requires_grad = req
        return False


class Tensor:
    """n-d float64 array, optionally recorded in a differentiation graph.

    `grad` is a same-shape numpy accumulator populated by `backward`;
    it accumulates additively across calls until reset to None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_vjp", "_track")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._inputs = ()
        self._vjp = None
        self._track = requires_grad

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, track={self._track})"

    def detach(self):
        t = Tensor(self.data)
        return t

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, inputs, vjp):
    out = Tensor(data)
    if _grad_enabled[0] and any(t._track for t in inputs):
        out._inputs = tuple(inputs)
        out._vjp = vjp
        out._track = True
    return out


# -- shape helpers ---------------------------------------------------------

def _sum_to(g, shape):
    """Reduce gradient `g` down to `shape` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data + b.data, (a, b),
                lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)))


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data / b.data, (a, b),
                 lambda g: (_sum_to(div(g, b), a.shape),
                            _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)))


def pow_const(a, p):
    a = as_tensor(a)
    p = float(p)
    return _node(a.data ** p, (a,),
                 lambda g: (mul(g, mul(Tensor(np.float64(p)), pow_const(a, p - 1.0))),))


def exp(a):
    a = as_tensor(a)
    out = _node(np.exp(a.data), (a,), None)
    out._vjp = (lambda g: (mul(g, out),)) if out._track else None
    return out


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a):
    a = as_tensor(a)
    out = _node(np.sqrt(a.data), (a,), None)
    if out._track:
        out._vjp = lambda g: (div(mul(g, Tensor(np.float64(0.5))), out),)
    return out


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    mask = np.where(a.data >= 0.0, 1.0, slope)
    return _node(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),))


def sigmoid(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    s = np.where(a.data >= 0, s, 1.0 - s)
    out = _node(s, (a,), None)
    if out._track:
        out._vjp = lambda g: (mul(g, mul(out, sub(Tensor(np.float64(1.0)), out))),)
    return out


def tanh(a):
    a = as_tensor(a)
    out = _node(np.tanh(a.data), (a,), None)
    if out._track:
        out._vjp = lambda g: (mul(g, sub(Tensor(np.float64(1.0)),
                                         mul(out, out))),)
    return out


def softplus(a):
    a = as_tensor(a)
    return _node(np.logaddexp(0.0, a.data), (a,),
                 lambda g: (mul(g, sigmoid(a)),))


# -- reductions / shape ops ------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            kshape = (1,) * a.ndim
        elif keepdims:
            kshape = g.shape
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(ax % a.ndim for ax in axes)
            kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        return (broadcast(reshape(g, kshape), a.shape),)

    return _node(data, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(tsum(a, axis, keepdims), Tensor(np.float64(1.0 / n)))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    # a strided view: downstream consumers tolerate non-contiguous data and
    # node payloads are never mutated in place, so no defensive copy
    return _node(a.data.transpose(axes), (a,),
                 lambda g: (transpose(g, inv),))


def broadcast(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    return _node(np.broadcast_to(a.data, shape), (a,),
                 lambda g: (_sum_to(g, a.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(narrow(g, axis, int(offs[i]), sizes[i])
                     for i in range(len(tensors)))

    return _node(data, tuple(tensors), vjp)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        return (embed(g, axis, start, a.shape),)

    return _node(np.ascontiguousarray(a.data[sl]), (a,), vjp)


def embed(a, axis, start, shape):
    """Place `a` into a zero tensor of `shape` at offset `start` along `axis`."""
    a = as_tensor(a)
    shape = tuple(shape)
    data = np.zeros(shape)
    sl = [slice(None)] * len(shape)
    sl[axis] = slice(start, start + a.shape[axis])
    data[tuple(sl)] = a.data
    length = a.shape[axis]
    return _node(data, (a,), lambda g: (narrow(g, axis, start, length),))


def take(a, idx):
    """Gather from the flattened tensor; `idx` is an integer ndarray."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    size, shape = a.size, a.shape

    def vjp(g):
        return (scatter(g, idx, shape),)

    return _node(a.data.ravel()[idx], (a,), vjp)


def scatter(a, idx, shape):
    """Adjoint of `take`: scatter-add values of `a` into zeros of `shape`."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = tuple(shape)
    size = int(np.prod(shape))
    data = np.bincount(idx.ravel(), weights=a.data.ravel(),
                       minlength=size).reshape(shape)
    return _node(data, (a,), lambda g: (take(g, idx),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-d tensors")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims {a.shape} @ {b.shape}")

    def vjp(g):
        da = (lambda: matmul(g, transpose(b, (1, 0)))) if a._track else None
        db = (lambda: matmul(transpose(a, (1, 0)), g)) if b._track else None
        return (da, db)

    return _node(a.data @ b.data, (a, b), vjp)


def flip_hw(a):
    """Flip the last two axes (kernel rotation for conv adjoints)."""
    a = as_tensor(a)
    return _node(a.data[..., ::-1, ::-1], (a,),
                 lambda g: (flip_hw(g),))


# -- convolution -----------------------------------------------------------

_CONV_EINSUM_PATHS = {}
_CONV_SCRATCH = {}


def _scratch(shape):
    # reusable im2col buffer; training is single-threaded and the buffer is
    # consumed within one forward call, so keyed reuse is safe
    buf = _CONV_SCRATCH.get(shape)
    if buf is None:
        buf = np.empty(shape)
        _CONV_SCRATCH[shape] = buf
    return buf


def _conv2d_forward(x, w, pad, keep_cols=False):
    """Returns (out, cols): `cols` is the im2col buffer when the batched
    path ran and the caller asked to keep it for the weight adjoint, else
    None."""
    ph, pw = pad
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    if kh * kw <= 9 and ho * wo >= 256:
        # large spatial extent: per-sample im2col into a pooled buffer, then
        # one batched gemm that writes the NCHW result directly.  Padding is
        # realized by zero-filling the out-of-range borders of each shifted
        # plane instead of materializing a padded copy of x.
        shape = (n, c, kh, kw, ho, wo)
        cols = np.empty(shape) if keep_cols else _scratch(shape)
        for a in range(kh):
            dy = a - ph
            y0, y1 = max(0, -dy), min(ho, h - dy)
            for b in range(kw):
                dx = b - pw
                x0, x1 = max(0, -dx), min(wo, wd - dx)
                plane = cols[:, :, a, b]
                if y0 > 0:
                    plane[:, :, :y0] = 0.0
                if y1 < ho:
                    plane[:, :, y1:] = 0.0
                if x0 > 0:
                    plane[:, :, y0:y1, :x0] = 0.0
                if x1 < wo:
                    plane[:, :, y0:y1, x1:] = 0.0
                np.copyto(plane[:, :, y0:y1, x0:x1],
                          x[:, :, y0 + dy:y1 + dy, x0 + dx:x1 + dx])
        out = np.matmul(w.reshape(1, co, ci * kh * kw),
                        cols.reshape(n, c * kh * kw, ho * wo))
        return out.reshape(n, co, ho, wo), (cols if keep_cols else None)
    if ph or pw:
        padded = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
        padded[:, :, ph:ph + h, pw:pw + wd] = x
        x = padded
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # [n,c,ho,wo,kh,kw]
    if kh * kw <= 9:
        # small kernels over small maps: contract the strided view directly
        key = (win.shape, w.shape)
        path = _CONV_EINSUM_PATHS.get(key)
        if path is None:
            path = np.einsum_path('ncyxab,ocab->noyx', win, w,
                                  optimize='optimal')[0]
            _CONV_EINSUM_PATHS[key] = path
        return np.einsum('ncyxab,ocab->noyx', win, w, optimize=path), None
    # large kernels (weight-gradient path): explicit im2col + one gemm
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(co, ci * kh * kw).T
    return np.ascontiguousarray(
        out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)), None


def conv2d_nopad_bias(x, w, pad, b=None):
    """Stride-1 cross-correlation; pad is an (ph, pw) pair, bias optional.

    Backward rules are themselves built from conv/transpose/flip, so this
    operator supports differentiation to any order.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape[1]} vs weight {w.shape[1]}")
    ph, pw = pad
    co, ci, kh, kw = w.shape
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
        raise DimensionError("conv2d: kernel larger than padded input")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (co,):
            raise DimensionError("conv2d bias must have one entry per out-channel")

    track = _grad_enabled[0] and (x._track or w._track
                                  or (b is not None and b._track))
    data, cols = _conv2d_forward(x.data, w.data, (ph, pw),
                                 keep_cols=track and w._track)

    def dx_thunk(g):
        wt = transpose(flip_hw(w), (1, 0, 2, 3))
        return conv2d_nopad_bias(g, wt, (kh - 1 - ph, kw - 1 - pw))

    def dw_thunk(g):
        if cols is not None and not _grad_enabled[0]:
            # first-order pass: contract the retained im2col buffer with g
            # directly instead of running another convolution
            n = g.shape[0]
            gd = g.data.reshape(n, co, -1)
            prod = np.matmul(gd, cols.reshape(n, ci * kh * kw, -1)
                             .transpose(0, 2, 1))
            return Tensor(prod.sum(axis=0).reshape(co, ci, kh, kw))
        # higher-order pass: the weight adjoint must stay differentiable
        return transpose(
            conv2d_nopad_bias(transpose(x, (1, 0, 2, 3)),
                              transpose(g, (1, 0, 2, 3)), (ph, pw)),
            (1, 0, 2, 3))

    def vjp(g):
        # thunks: each adjoint is only spent when its input both tracks
        # gradients and is needed by the active sweep
        dx = (lambda: dx_thunk(g)) if x._track else None
        dw = (lambda: dw_thunk(g)) if w._track else None
        if b is None:
            return (dx, dw)
        db = (lambda: tsum(g, axis=(0, 2, 3))) if b._track else None
        return (dx, dw, db)

    if b is None:
        return _node(data, (x, w), vjp)
    data += b.data[None, :, None, None]
    return _node(data, (x, w, b), vjp)


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation with per-output-channel bias.

    Output spatial size is (H + 2*pad - kh)//stride + 1.  stride > 1 is
    realized by subsampling the stride-1 result (desk scale; the networks
    here only ever use stride 1).
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise AutodiffError("stride must be >= 1")
    if stride == 1:
        return conv2d_nopad_bias(x, w, (pad, pad), b)
    out = conv2d_nopad_bias(x, w, (pad, pad))
    if stride > 1:
        n, co, ho, wo = out.shape
        hs = np.arange(0, ho, stride)
        ws = np.arange(0, wo, stride)
        base = (np.arange(n * co)[:, None, None] * (ho * wo)
                + hs[None, :, None] * wo + ws[None, None, :])
        out = reshape(take(out, base), (n, co, len(hs), len(ws)))
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError("conv2d bias must have one entry per out-channel")
        out = add(out, reshape(b, (1, w.shape[0], 1, 1)))
    return out


def linear(x, w, b=None):
    """x [N,Din] @ w.T [Din,Dout] + b."""
    out = matmul(x, transpose(w, (1, 0)))
    if b is not None:
        out = add(out, reshape(b, (1, w.shape[0])))
    return out


# -- resampling ------------------------------------------------------------

_upsample_idx_cache = {}


def upsample2(x):
    """Nearest-neighbor 2x upsampling on [N,C,H,W]."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    key = x.shape
    idx = _upsample_idx_cache.get(key)
    if idx is None:
        ys = np.repeat(np.arange(h), 2)
        xs = np.repeat(np.arange(w), 2)
        idx = (np.arange(n * c)[:, None, None] * (h * w)
               + ys[None, :, None] * w + xs[None, None, :])
        _upsample_idx_cache[key] = idx
    return reshape(take(x, idx), (n, c, 2 * h, 2 * w))


def avg_pool2(x):
    """2x2 average pooling on [N,C,H,W]; H and W must be even."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError("avg_pool2 needs even spatial dims")
    r = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return tmean(r, axis=(3, 5))


# -- normalization composites ---------------------------------------------

def instance_norm(x, eps=1e-8):
    """Per-sample per-channel spatial normalization of [N,C,H,W].

    Fused primitive with the closed-form adjoint
        dx = inv * (g - mean(g) - xhat * mean(g * xhat)),
    means taken spatially.  When a higher-order graph is being recorded the
    adjoint rebuilds xhat/inv from x with tracked operators, so the
    gradient penalty can differentiate through it; otherwise it reuses the
    arrays cached at forward time.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] * x.shape[3] == 0:
        raise DimensionError("instance_norm needs [N,C,H,W] with spatial extent")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def vjp(g):
        if _grad_enabled[0]:
            mu_t = tmean(x, axis=(2, 3), keepdims=True)
            xc_t = sub(x, mu_t)
            var_t = tmean(mul(xc_t, xc_t), axis=(2, 3), keepdims=True)
            inv_t = div(Tensor(np.float64(1.0)),
                        sqrt(add(var_t, Tensor(np.float64(eps)))))
            xhat = mul(xc_t, inv_t)
        else:
            inv_t = Tensor(inv)
            xhat = Tensor(out)
        mg = tmean(g, axis=(2, 3), keepdims=True)
        mgx = tmean(mul(g, xhat), axis=(2, 3), keepdims=True)
        dx = mul(inv_t, sub(sub(g, mg), mul(xhat, mgx)))
        return (dx,)

    return _node(out, (x,), vjp)


def adain(x, scale_map, bias_map, eps=1e-8):
    """Adaptive instance normalization with full-resolution modulation maps.

    y = (1 + scale) * instance_norm(x) + bias.  Zero maps give plain
    instance normalization.
    """
    x, scale_map, bias_map = as_tensor(x), as_tensor(scale_map), as_tensor(bias_map)
    if not (x.shape == scale_map.shape == bias_map.shape):
        raise DimensionError("adain arguments must share shape")
    normed = instance_norm(x, eps)
    return add(mul(add(Tensor(np.float64(1.0)), scale_map), normed), bias_map)


def pixel_norm(x, eps=1e-8):
    """Normalize each row of [N,D] to unit RMS."""
    x = as_tensor(x)
    ms = tmean(mul(x, x), axis=1, keepdims=True)
    return div(x, sqrt(add(ms, Tensor(np.float64(eps)))))


# -- backward machinery ----------------------------------------------------

def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for inp in t._inputs:
            if inp._track and id(inp) not in visited:
                stack.append((inp, False))
    return order  # inputs strictly before consumers


def _backprop(root, seed, keep_ids, create_graph, needed_ids=None):
    """Reverse sweep.  A vjp may return per-input thunks (zero-arg callables)
    instead of tensors; a thunk is only forced when its input both tracks
    gradients and lies on a path to a requested target (`needed_ids`)."""
    grads = {id(root): seed}
    order = _toposort(root)
    ctx = no_grad() if not create_graph else _NullCtx()
    with ctx:
        for t in reversed(order):
            g = grads.get(id(t))
            if g is None:
                continue
            if t._vjp is not None:
                for inp, gi in zip(t._inputs, t._vjp(g)):
                    if gi is None or not inp._track:
                        continue
                    if needed_ids is not None and id(inp) not in needed_ids:
                        continue
                    if callable(gi):
                        gi = gi()
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else add(prev, gi)
            if id(t) not in keep_ids:
                del grads[id(t)]
    return grads, order


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def backward(loss):
    """Accumulate d(loss)/d(leaf) into `.grad` of every requires_grad leaf."""
    loss = as_tensor(loss)
    if loss.size != 1:
        raise AutodiffError("backward requires a scalar loss")
    if not loss._track:
        return
    order = _toposort(loss)
    keep = {id(t) for t in order if t._vjp is None and t.requires_grad}
    keep.add(id(loss))
    grads, order = _backprop(loss, Tensor(np.ones_like(loss.data)), keep, False)
    for t in order:
        if t._vjp is None and t.requires_grad:
            g = grads.get(id(t))
            if g is None:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g.data


def grad_of(output, inputs, create_graph=False):
    """Gradients of a scalar `output` w.r.t. `inputs` as Tensors.

    With create_graph=True the returned tensors are themselves recorded,
    enabling double backpropagation.  Raises if an input is not connected
    to the output through recorded operations.
    """
    output = as_tensor(output)
    if output.size != 1:
        raise AutodiffError("grad_of requires a scalar output")
    keep = {id(t) for t in inputs}
    keep.add(id(output))
    # restrict the sweep to nodes lying on a path from the output to one of
    # the requested inputs; gradients of spectator leaves (e.g. weights
    # during a gradient-penalty pass) are then never materialized
    targets = {id(t) for t in inputs}
    needed = set()
    for t in _toposort(output):  # producers before consumers
        if id(t) in targets or any(id(i) in needed for i in t._inputs):
            needed.add(id(t))
    grads, _ = _backprop(output, Tensor(np.ones_like(output.data)), keep,
                         create_graph, needed_ids=needed)
    result = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            raise AutodiffError("input is not connected to the output graph")
        result.append(g)
    return result


def grad_norm_sq(output, wrt):
    """Sum of squared gradients of `output` w.r.t. `wrt`, per sample.

    `output` may be a scalar or a per-sample vector whose entries each
    depend only on the corresponding sample of `wrt`.  Returns a [N]
    tensor when `wrt` is batched ([N,...]), else a scalar tensor.  The
    result remains differentiable (double backprop).
    """
    output = as_tensor(output)
    total = output if output.size == 1 else tsum(output)
    (gx,) = grad_of(total, [wrt], create_graph=True)
    if gx.ndim > 1:
        return tsum(mul(gx, gx), axis=tuple(range(1, gx.ndim)))
    return tsum(mul(gx, gx))


# -- optimizer -------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction over a list of leaf tensors.

    `step` refuses to apply non-finite gradients (no partial update) and
    resets all gradients to zero (None) afterwards.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise AutodiffError("non-finite gradient; Adam step aborted")
            grads.append(g)
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.grad = None

    def reset(self):
        self.t = 0
        for m, v in zip(self.m, self.v):
            m[:] = 0.0
            v[:] = 0.0
