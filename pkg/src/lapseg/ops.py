"""Differentiable operations over :class:`lapseg.tensor.Tensor`.

Every op computes its forward value eagerly with numpy and, when a tape is
active and an input requires a gradient, records a backward closure. Hot
spatial kernels (depthwise correlations) dispatch through
:mod:`lapseg.backend`; scatter-style backward passes use ``np.bincount``
on cached index arrays, which accumulates in fixed index order and is
therefore deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from .backend import get_kernels
from .tensor import (
    NumericalError,
    ShapeError,
    Tape,
    Tensor,
    _wrap,
    active_tape,
)

_K = None


def _kernels():
    global _K
    if _K is None:
        _K = get_kernels()
    return _K


def _record(out_arr, inputs, backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = _wrap(out_arr, requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    out = a.data + b.data

    def backward(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = -_reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g):
        ga = _reduce_to(g * bd, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _reduce_to(g / bd, a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _reduce_to(-g * ad / (bd * bd), b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * s

    def backward(g):
        return (g * s,)

    return _record(out, (x,), backward)


def add_scalar(x: Tensor, s: float) -> Tensor:
    out = x.data + float(s)

    def backward(g):
        return (g,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused y = x @ w (+ b) for 2-D x; one tape node."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {xd.shape} @ {wd.shape}")
    if xd.shape[1] != wd.shape[0]:
        raise ShapeError(f"linear inner extents differ: {xd.shape} @ {wd.shape}")
    out = np.matmul(xd, wd)
    if b is not None:
        out += b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)

    def backward(g):
        gx = np.matmul(g, wd.T) if x.requires_grad else None
        gw = np.matmul(xd.T, g) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record(out, inputs, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands, batched when one side is 3-D."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    _check_same_dtype(a, b, "matmul")
    out = np.matmul(ad, bd)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _reduce_to(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = np.reshape(x.data, shape)

    def backward(g):
        return (np.reshape(g, old),)

    return _record(out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _record(out, (x,), backward)


def swapaxes(x: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(x, axes)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tensors, backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(out, (x,), backward)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.shape[i] for i in axis]))
    else:
        n = x.shape[axis]
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if axis is None:
            gx = np.broadcast_to(g, shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gx = np.broadcast_to(gg, shape)
        return (gx / n,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalisation and activations

def softmax(x: Tensor, axis: int) -> Tensor:
    """Softmax along one axis, stabilised by subtracting the axis max."""
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {xd.shape}")
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    shifted = xd - m
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        gsum = np.sum(g, axis=axis, keepdims=True)
        return (g - np.exp(out) * gsum,)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd, gd, bd = x.data, gain.data, bias.data
    d = xd.shape[-1]
    if gd.shape != (d,) or bd.shape != (d,):
        raise ShapeError("layer_norm affine params must match the last axis")
    rd = 1.0 / d
    mu = xd.sum(axis=-1, keepdims=True) * rd
    xc = xd - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * rd
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bd

    def backward(g):
        gx = ggain = gbias = None
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        if x.requires_grad:
            dxhat = g * gd
            m1 = dxhat.sum(axis=-1, keepdims=True) * rd
            m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) * rd
            gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation:

    ``0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))``
    """
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        return (g * dx,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# spatial ops on (H, W, C) maps

_REFLECT_IDX: dict = {}
_PATCH_IDX: dict = {}


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Mirror-without-repeat index map of length n + 2*pad; any pad size."""
    key = (n, pad)
    idx = _REFLECT_IDX.get(key)
    if idx is None:
        pos = np.arange(-pad, n + pad)
        if n == 1:
            idx = np.zeros(pos.shape, dtype=np.intp)
        else:
            period = 2 * n - 2
            j = np.mod(pos, period)
            idx = np.where(j < n, j, period - j).astype(np.intp)
        _REFLECT_IDX[key] = idx
    return idx


def pad_reflect(x: Tensor, ph: int, pw: int) -> Tensor:
    """Reflect-pad the two leading spatial axes of an (H, W, C) map."""
    if x.ndim != 3:
        raise ShapeError(f"pad_reflect expects (H, W, C), got {x.shape}")
    if ph == 0 and pw == 0:
        return _record(x.data, (x,), lambda g: (g,))
    h, w, c = x.shape
    ih = _reflect_indices(h, ph)
    iw = _reflect_indices(w, pw)
    out = x.data[np.ix_(ih, iw)]
    kern = _kernels()

    def backward(g):
        t = kern.scatter_axis1(np.ascontiguousarray(g), iw, w)
        return (kern.scatter_axis0(t, ih, h),)

    return _record(out, (x,), backward)


def extract_patches(x: Tensor, kh: int, kw: int, sh: int, sw: int) -> Tensor:
    """Gather (kh x kw) patches at stride (sh, sw) into rows.

    Output is (n_patches, kh*kw*C); features ordered (di, dj, channel) and
    patches ordered row-major over the patch grid.
    """
    if x.ndim != 3:
        raise ShapeError(f"extract_patches expects (H, W, C), got {x.shape}")
    h, w, c = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"patch {kh}x{kw} larger than input {h}x{w}")
    key = (h, w, c, kh, kw, sh, sw)
    idx = _PATCH_IDX.get(key)
    if idx is None:
        pi = np.arange(0, h - kh + 1, sh)
        pj = np.arange(0, w - kw + 1, sw)
        rows = pi[:, None, None, None, None] + np.arange(kh)[None, None, :, None, None]
        cols = pj[None, :, None, None, None] + np.arange(kw)[None, None, None, :, None]
        chans = np.arange(c)[None, None, None, None, :]
        idx = ((rows * w + cols) * c + chans).reshape(len(pi) * len(pj), kh * kw * c)
        _PATCH_IDX[key] = idx
    out = x.data.reshape(-1)[idx]

    def backward(g):
        gx = np.bincount(idx.ravel(), weights=g.ravel(), minlength=h * w * c)
        return (gx.reshape(h, w, c).astype(g.dtype, copy=False),)

    return _record(out, (x,), backward)


def corr2d_valid(xp: Tensor, k: Tensor) -> Tensor:
    """Valid per-channel 2-D cross-correlation; k is (kh, kw, C)."""
    if xp.ndim != 3 or k.ndim != 3:
        raise ShapeError("corr2d_valid expects (H, W, C) input and (kh, kw, C) kernel")
    kh, kw, kc = k.shape
    if kc != xp.shape[2]:
        raise ShapeError(f"kernel channels {kc} != input channels {xp.shape[2]}")
    if kh > xp.shape[0] or kw > xp.shape[1]:
        raise ShapeError(f"kernel {kh}x{kw} larger than (padded) input {xp.shape[:2]}")
    _check_same_dtype(xp, k, "corr2d_valid")
    kern = _kernels()
    xpd, kd = xp.data, k.data
    out = kern.corr2d_valid(xpd, kd)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = kern.corr2d_grad_x(g, kd) if xp.requires_grad else None
        gk = kern.corr2d_grad_k(xpd, g, kh, kw) if k.requires_grad else None
        return gx, gk

    return _record(out, (xp, k), backward)


def corr1d_valid(xp: Tensor, k1: Tensor, axis: int) -> Tensor:
    """Valid 1-D correlation along spatial axis 0 or 1, shared across channels.

    The kernel is a constant (no gradient path); used by the separable
    Gaussian blur.
    """
    if axis not in (0, 1):
        raise ShapeError("corr1d_valid axis must be 0 or 1")
    if k1.requires_grad:
        raise NotImplementedError("corr1d_valid kernels are constants")
    if k1.shape[0] > xp.shape[axis]:
        raise ShapeError("kernel longer than (padded) input axis")
    _check_same_dtype(xp, k1, "corr1d_valid")
    kern = _kernels()
    k1d = k1.data

    out = kern.corr1d_valid(xp.data, k1d, axis)

    def backward(g):
        gx = kern.corr1d_grad_x(np.ascontiguousarray(g), k1d, axis)
        return gx, None

    return _record(out, (xp, k1), backward)


def depthwise_conv2d(x: Tensor, k: Tensor) -> Tensor:
    """Same-size per-channel cross-correlation with reflect padding.

    x: (H, W, C); k: (kh, kw, C) with odd kh, kw.
    """
    if k.ndim != 3:
        raise ShapeError(f"depthwise kernel must be (kh, kw, C), got {k.shape}")
    kh, kw, _ = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"same-padding depthwise conv needs odd kernel, got {kh}x{kw}")
    xp = pad_reflect(x, kh // 2, kw // 2)
    return corr2d_valid(xp, k)


# ---------------------------------------------------------------------------
# fused attention kernels (single tape nodes; hand-derived backwards)

def _softmax_raw(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def attention_context(k: Tensor, v: Tensor, heads: int, groups: int = 1) -> Tensor:
    """Per-head context sum_g softmax_tokens(K_g)^T V_g as one node.

    k, v: (groups * n, d) with group-major rows. The token softmax runs
    within each group; contexts are summed over groups (the pyramid-level
    fusion). Returns (heads, dk, dv).
    """
    gn, d = k.shape
    if k.shape != v.shape:
        raise ShapeError(f"context operands disagree: {k.shape} vs {v.shape}")
    if d % heads:
        raise ShapeError(f"d_model {d} not divisible by {heads} heads")
    if gn % groups:
        raise ShapeError(f"{gn} rows do not split into {groups} groups")
    n = gn // groups
    dk = d // heads
    if heads == 1:
        # BLAS path; the einsum below is equivalent but slower at this shape.
        vd = v.data
        rho3 = _softmax_raw(k.data.reshape(groups, n, d), 1)
        rho = rho3.reshape(gn, d)
        out = (rho.T @ vd)[None]

        def backward(g):
            g2 = g[0]
            gk = gv = None
            if v.requires_grad:
                gv = rho @ g2
            if k.requires_grad:
                drho = (vd @ g2.T).reshape(groups, n, d)
                dk3 = rho3 * (drho - (drho * rho3).sum(axis=1, keepdims=True))
                gk = dk3.reshape(gn, d)
            return gk, gv

        return _record(out, (k, v), backward)

    k4 = k.data.reshape(groups, n, heads, dk)
    v4 = v.data.reshape(groups, n, heads, dk)
    rho = _softmax_raw(k4, 1)
    out = np.einsum("gnhk,gnhv->hkv", rho, v4)

    def backward(g):
        gk = gv = None
        if v.requires_grad:
            gv = np.einsum("gnhk,hkv->gnhv", rho, g).reshape(gn, d)
        if k.requires_grad:
            drho = np.einsum("hkv,gnhv->gnhk", g, v4)
            dk4 = rho * (drho - (drho * rho).sum(axis=1, keepdims=True))
            gk = dk4.reshape(gn, d)
        return gk, gv

    return _record(out, (k, v), backward)


def attention_apply(q: Tensor, context: Tensor) -> Tensor:
    """softmax_features(Q) applied per head to a (heads, dk, dv) context,
    heads re-merged -> (n, heads*dv)."""
    n, d = q.shape
    heads, dk, dv = context.shape
    if heads * dk != d:
        raise ShapeError(f"query width {d} does not match context {context.shape}")
    ctx = context.data
    if heads == 1:
        rho = _softmax_raw(q.data, 1)
        ctx2 = ctx[0]
        out = rho @ ctx2

        def backward(g):
            gq = gctx = None
            if context.requires_grad:
                gctx = (rho.T @ g)[None]
            if q.requires_grad:
                drho = g @ ctx2.T
                gq = rho * (drho - (drho * rho).sum(axis=1, keepdims=True))
            return gq, gctx

        return _record(out, (q, context), backward)

    q3 = q.data.reshape(n, heads, dk)
    rho = _softmax_raw(q3, 2)
    out = np.einsum("nhk,hkv->nhv", rho, ctx).reshape(n, heads * dv)

    def backward(g):
        g3 = g.reshape(n, heads, dv)
        gq = gctx = None
        if context.requires_grad:
            gctx = np.einsum("nhk,nhv->hkv", rho, g3)
        if q.requires_grad:
            drho = np.einsum("nhv,hkv->nhk", g3, ctx)
            dq3 = rho * (drho - (drho * rho).sum(axis=2, keepdims=True))
            gq = dq3.reshape(n, d)
        return gq, gctx

    return _record(out, (q, context), backward)


def blend2(e: Tensor, f: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel 2-way blend w[0]*e + w[1]*f + b (the 2x1x1 depthwise
    fusion conv) as one node."""
    if e.shape != f.shape:
        raise ShapeError(f"blend operands disagree: {e.shape} vs {f.shape}")
    c = e.shape[-1]
    if w.shape != (2, c) or b.shape != (c,):
        raise ShapeError(f"blend params w{w.shape}, b{b.shape} do not fit C={c}")
    ed, fd, wd = e.data, f.data, w.data
    out = ed * wd[0] + fd * wd[1] + b.data

    def backward(g):
        ge = g * wd[0] if e.requires_grad else None
        gf = g * wd[1] if f.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.stack([(g * ed).sum(axis=0), (g * fd).sum(axis=0)])
        gb = g.sum(axis=0) if b.requires_grad else None
        return ge, gf, gw, gb

    return _record(out, (e, f, w, b), backward)


def separable_blur(x: Tensor, k1: Tensor, radius: int) -> Tensor:
    """Reflect-padded separable blur (rows then columns) as one node.

    Equals the 2-D correlation with the outer-product kernel exactly; the
    kernel is a constant (no gradient path).
    """
    if x.ndim != 3:
        raise ShapeError(f"separable_blur expects (H, W, C), got {x.shape}")
    if k1.requires_grad:
        raise NotImplementedError("blur kernels are constants")
    kern = _kernels()
    h, w, c = x.shape
    ih = _reflect_indices(h, radius)
    iw = _reflect_indices(w, radius)
    k1d = k1.data
    y = kern.corr1d_valid(x.data[ih], k1d, 0)
    out = kern.corr1d_valid(y[:, iw], k1d, 1)

    def backward(g):
        t = kern.corr1d_grad_x(np.ascontiguousarray(g), k1d, 1)
        t = kern.corr1d_grad_x(kern.scatter_axis1(t, iw, w), k1d, 0)
        return kern.scatter_axis0(t, ih, h), None

    return _record(out, (x, k1), backward)


# ---------------------------------------------------------------------------
# verification harness

def grad_check(f, x: Tensor, h: float | None = None, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Compare the tape gradient of scalar-valued ``f`` against central
    differences at ``x``.

    Returns max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``. ``h`` defaults to 1e-3
    for float32 and 1e-5 for float64. ``max_coords`` caps the number of
    probed coordinates (deterministic subsample).
    """
    xd = np.asarray(x.data)
    if h is None:
        h = 1e-3 if xd.dtype == np.float32 else 1e-5
    probe = Tensor(xd.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    if y.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise NumericalError("non-finite value in grad_check forward pass")
    tape.backward(y)
    analytic = probe.grad
    if analytic is None:
        analytic = np.zeros_like(xd)

    flat = xd.reshape(-1)
    n = flat.size
    if max_coords is not None and n > max_coords:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = range(n)

    aflat = analytic.reshape(-1)
    worst = 0.0
    for i in coords:
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        fp = f(Tensor(bumped.reshape(xd.shape))).item()
        bumped[i] = flat[i] - h
        fm = f(Tensor(bumped.reshape(xd.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError("non-finite value while probing finite differences")
        numeric = (fp - fm) / (2.0 * h)
        a = float(aflat[i])
        rel = abs(a - numeric) / max(1.0, abs(a))
        if rel > worst:
            worst = rel
    return worst
