"""Attention mechanisms: linear-time efficient attention, pyramid frequency
attention, their learned per-channel fusion, the Kronecker-factored
diversity shortcut (DES), and the dense softmax-attention baseline.

Efficient attention normalises the query along its feature axis and the
key along the token axis, then contracts keys against values into a small
d x d context before the query ever touches it; cost is linear in tokens.
Frequency attention builds one such context per Laplacian-pyramid level
(through per-level bias-free projections, so empty bands contribute
nothing), sums the contexts, and applies the shared query. The dense
baseline exists for spectral probing only and never runs inside the
segmentation forward path.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .module import Linear, Module, glorot_scale, param
from .pyramid import GaussianSpec, build_pyramid
from .tensor import ShapeError, Tensor, _wrap


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(n, d) -> (heads, n, d/heads)"""
    n, d = x.shape
    if d % heads:
        raise ShapeError(f"d_model {d} not divisible by {heads} heads")
    return ops.transpose(ops.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """(heads, n, dk) -> (n, heads*dk)"""
    h, n, dk = x.shape
    return ops.reshape(ops.transpose(x, (1, 0, 2)), (n, h * dk))


def reference_self_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Dense softmax attention, softmax(Q K^T / sqrt(d_k)) V, per head.

    Quadratic in tokens; baseline for probes and the complexity benchmark.
    """
    if q.shape != k.shape or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    qs, ks, vs = (split_heads(t, heads) for t in (q, k, v))
    dk = qs.shape[2]
    scores = ops.scale(ops.matmul(qs, ops.swapaxes(ks, 1, 2)), 1.0 / math.sqrt(dk))
    att = ops.softmax(scores, axis=2)
    return merge_heads(ops.matmul(att, vs))


def efficient_context(k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Per-head context rho_k(K)^T V of shape (heads, d_k, d_v)."""
    return ops.attention_context(k, v, heads)


def apply_query(q: Tensor, context: Tensor, heads: int = 1) -> Tensor:
    """rho_q(Q) applied to a per-head context; returns (n, d_model)."""
    del heads  # implied by the context shape
    return ops.attention_apply(q, context)


def efficient_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Linear-time attention: rho_q(Q) (rho_k(K)^T V), per head.

    rho_q is a softmax over each token's feature scores, rho_k a softmax
    over tokens for each feature; the d_k x d_v context is formed before
    the query is applied, so cost is O(n d^2) instead of O(n^2 d).
    """
    if q.shape != k.shape or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    return apply_query(q, efficient_context(k, v, heads), heads)


def _balanced_factors(d: int) -> tuple[int, int]:
    """Most balanced (a, b) with a*b == d and a <= b."""
    for a in range(int(math.isqrt(d)), 0, -1):
        if d % a == 0:
            return a, d // a
    raise ValueError(f"no factorization for {d}")


class DesParams(Module):
    """Kronecker factors A (a x a) and B (b x b) with a*b == d_model.

    Factors start near zero (scale 1e-2) so the shortcut barely perturbs
    a freshly initialised block.
    """

    def __init__(self, rng, d_model: int, scale: float = 1e-2, dtype=np.float32):
        a, b = _balanced_factors(d_model)
        self.a_factor = param(rng, (a, a), scale, dtype)
        self.b_factor = param(rng, (b, b), scale, dtype)

    @classmethod
    def from_factors(cls, a_factor, b_factor):
        p = cls.__new__(cls)
        p.a_factor = a_factor if isinstance(a_factor, Tensor) else Tensor(a_factor, requires_grad=True)
        p.b_factor = b_factor if isinstance(b_factor, Tensor) else Tensor(b_factor, requires_grad=True)
        return p


def des(x: Tensor, p: DesParams) -> Tensor:
    """Diversity-enhanced shortcut x @ (A kron B), without materialising the
    d x d Kronecker matrix.

    Uses the reshape identity: view each token row as an (a, b) matrix X,
    then x (A kron B) row == vec(A^T X B).
    """
    n, d = x.shape
    a = p.a_factor.shape[0]
    b = p.b_factor.shape[0]
    if a * b != d:
        raise ShapeError(f"DES factors {a}x{a}, {b}x{b} do not fit d_model {d}")
    x3 = ops.reshape(x, (n, a, b))
    z = ops.swapaxes(ops.matmul(x3, p.b_factor), 1, 2)   # (n, b, a) = (X B)^T
    y = ops.swapaxes(ops.matmul(z, p.a_factor), 1, 2)    # vec(A^T X B) as (n, a, b)
    return ops.reshape(y, (n, d))


class FusionParams(Module):
    """Per-channel 2-way blend; the 2x1x1 depthwise conv over the stacked
    branch axis collapses to out = w0*E + w1*F + b.

    Starts at an equal 0.5/0.5 blend with zero bias.
    """

    def __init__(self, d_model: int, dtype=np.float32):
        self.w = _wrap(np.full((2, d_model), 0.5, dtype=dtype), True)
        self.b = _wrap(np.zeros(d_model, dtype=dtype), True)


def fuse(fp: FusionParams, e: Tensor, f: Tensor) -> Tensor:
    return ops.blend2(e, f, fp.w, fp.b)


class AttentionParams(Module):
    """Learned projections for one enhancement layer.

    W_q/W_k/W_v are shared d->d bias-free maps (the query is common to both
    branches). When the frequency branch is active there is one bias-free
    K and V projection per pyramid level (L bands + residual) plus fusion
    weights.
    """

    def __init__(self, rng, d_model: int, heads: int, levels: int | None,
                 use_des: bool = True, dtype=np.float32):
        if d_model % heads:
            raise ShapeError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = Linear(rng, d_model, d_model, bias=False, dtype=dtype)
        self.w_k = Linear(rng, d_model, d_model, bias=False, dtype=dtype)
        self.w_v = Linear(rng, d_model, d_model, bias=False, dtype=dtype)
        if levels is not None:
            if levels < 1:
                raise ValueError("frequency attention needs at least one level")
            # One bias-free d->d projection per pyramid level, stored stacked
            # (levels, d, d) so all levels project in one batched matmul.
            scale = glorot_scale(d_model, d_model)
            self.level_k = param(rng, (levels, d_model, d_model), scale, dtype)
            self.level_v = param(rng, (levels, d_model, d_model), scale, dtype)
            self.fusion = FusionParams(d_model, dtype=dtype)
        else:
            self.level_k = None
            self.level_v = None
            self.fusion = None
        self.des = DesParams(rng, d_model, dtype=dtype) if use_des else None

    @property
    def levels(self) -> int | None:
        return None if self.level_k is None else self.level_k.shape[0]


def frequency_context(x: Tensor, params: AttentionParams, spec: GaussianSpec) -> Tensor:
    """Sum over pyramid levels of each level's rho_k(K_l)^T V_l context."""
    if x.ndim != 3:
        raise ShapeError(f"frequency_attention expects (H, W, C), got {x.shape}")
    if params.level_k is None:
        raise ValueError("AttentionParams built without frequency levels")
    h_, w_, c = x.shape
    n = h_ * w_
    levels = build_pyramid(x, spec).levels
    if len(levels) != params.levels:
        raise ShapeError(
            f"pyramid has {len(levels)} levels but params carry {params.levels}"
        )
    stack = ops.concat([ops.reshape(lv, (1, n, c)) for lv in levels], axis=0)
    k = ops.reshape(ops.matmul(stack, params.level_k), (len(levels) * n, c))
    v = ops.reshape(ops.matmul(stack, params.level_v), (len(levels) * n, c))
    return ops.attention_context(k, v, params.heads, groups=len(levels))


def frequency_attention(x: Tensor, params: AttentionParams, spec: GaussianSpec) -> Tensor:
    """Pyramid-level attention over an (H, W, C) map.

    Per level l: K_l, V_l come from that level's projections, the context
    rho_k(K_l)^T V_l is accumulated over levels, and the summed context is
    applied to the query of the undecomposed input. Returns (H*W, C).
    """
    h_, w_, c = x.shape
    context = frequency_context(x, params, spec)
    q = params.w_q(ops.reshape(x, (h_ * w_, c)))
    return apply_query(q, context, params.heads)


def ef_att(x: Tensor, params: AttentionParams, spec: GaussianSpec) -> Tensor:
    """Fused efficient + frequency attention of an (H, W, C) map -> (H*W, C).

    The query projection is shared by both branches and computed once.
    """
    h_, w_, c = x.shape
    flat = ops.reshape(x, (h_ * w_, c))
    q = params.w_q(flat)
    e = apply_query(q, efficient_context(params.w_k(flat), params.w_v(flat),
                                         params.heads))
    f = apply_query(q, frequency_context(x, params, spec))
    return fuse(params.fusion, e, f)
