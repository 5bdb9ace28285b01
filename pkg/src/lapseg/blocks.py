"""Transformer building blocks: overlapping patch embedding, 2x2 patch
merging, pixel-shuffle patch expanding, MiX-FFN, and the enhancement layer
that ties attention, DES and the FFN together.

Layer composition (matching the block wiring):

    y   = x + attention(LN1(x)) + des(x)
    out = y + mix_ffn(LN2(y))

where ``attention`` is the fused efficient+frequency pair by default, the
efficient branch alone for the frequency ablation, or dense softmax
attention for the spectral baseline.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .attention import (
    AttentionParams,
    des,
    ef_att,
    efficient_attention,
    reference_self_attention,
)
from .module import DepthwiseConv2d, Linear, LayerNorm, Module, param
from .pyramid import GaussianSpec
from .tensor import ShapeError, Tensor

ATTENTION_KINDS = ("ef_att", "efficient_only", "softmax")


class PatchEmbed(Module):
    """Overlapping 4x downsampling embed: 7x7 window, stride 4, reflect pad 3,
    realised as patch extraction + linear map, followed by LayerNorm."""

    KERNEL = 7
    STRIDE = 4
    PAD = 3

    def __init__(self, rng, c_in: int, c_out: int, dtype=np.float32):
        fan_in = self.KERNEL * self.KERNEL * c_in
        self.proj = Linear(rng, fan_in, c_out, bias=True, dtype=dtype)
        self.norm = LayerNorm(c_out, dtype=dtype)
        self.c_in = c_in

    def __call__(self, img: Tensor) -> Tensor:
        h, w, c = img.shape
        if h % 4 or w % 4:
            raise ShapeError(f"patch_embed needs H, W divisible by 4, got {h}x{w}")
        if c != self.c_in:
            raise ShapeError(f"patch_embed expects {self.c_in} channels, got {c}")
        padded = ops.pad_reflect(img, self.PAD, self.PAD)
        patches = ops.extract_patches(padded, self.KERNEL, self.KERNEL,
                                      self.STRIDE, self.STRIDE)
        return self.norm(self.proj(patches))


class PatchMerge(Module):
    """Concatenate each 2x2 token neighbourhood, LayerNorm, project to c_out."""

    def __init__(self, rng, c_in: int, c_out: int, dtype=np.float32):
        self.norm = LayerNorm(4 * c_in, dtype=dtype)
        self.proj = Linear(rng, 4 * c_in, c_out, bias=True, dtype=dtype)
        self.c_in = c_in

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        if h % 2 or w % 2:
            raise ShapeError(f"patch_merge needs even grid, got {h}x{w}")
        grid = ops.reshape(x, (h, w, self.c_in))
        neigh = ops.extract_patches(grid, 2, 2, 2, 2)
        return self.proj(self.norm(neigh))


class PatchExpand(Module):
    """Project to factor^2 * c_out features, then pixel-shuffle to the
    factor-times finer token grid."""

    def __init__(self, rng, c_in: int, c_out: int, factor: int, dtype=np.float32):
        self.proj = Linear(rng, c_in, factor * factor * c_out, bias=True, dtype=dtype)
        self.factor = factor
        self.c_out = c_out

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        f, co = self.factor, self.c_out
        t = self.proj(x)                                   # (h*w, f*f*co)
        t = ops.reshape(t, (h, w, f, f, co))
        t = ops.transpose(t, (0, 2, 1, 3, 4))              # (h, f, w, f, co)
        return ops.reshape(t, (h * f * w * f, co))


class MixFFN(Module):
    """linear(C -> 4C) -> 3x3 depthwise conv -> GELU -> linear(4C -> C)."""

    EXPANSION = 4

    def __init__(self, rng, channels: int, dtype=np.float32):
        hidden = self.EXPANSION * channels
        self.lin1 = Linear(rng, channels, hidden, bias=True, dtype=dtype)
        self.dw = DepthwiseConv2d(rng, hidden, 3, 3, bias=True, dtype=dtype)
        # Damped output projection keeps a fresh block close to identity.
        self.lin2 = Linear(rng, hidden, channels, bias=True, dtype=dtype, gain=0.5)
        self.channels = channels

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        n, c = x.shape
        if n != h * w or c != self.channels:
            raise ShapeError(f"mix_ffn grid mismatch: {x.shape} vs {h}x{w}x{self.channels}")
        hidden = self.lin1(x)
        grid = ops.reshape(hidden, (h, w, hidden.shape[1]))
        mixed = ops.reshape(self.dw(grid), (n, hidden.shape[1]))
        return self.lin2(ops.gelu(mixed))


class TransformerLayer(Module):
    """One efficient-enhancement layer over a token grid of known shape."""

    def __init__(self, rng, d_model: int, heads: int, spec: GaussianSpec,
                 kind: str = "ef_att", use_des: bool = True, dtype=np.float32):
        if kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {kind!r}")
        levels = spec.levels + 1 if kind == "ef_att" else None
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.attn = AttentionParams(rng, d_model, heads, levels,
                                    use_des=use_des, dtype=dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.ffn = MixFFN(rng, d_model, dtype=dtype)
        self.kind = kind
        self.spec = spec
        self.d_model = d_model

    def attention(self, normed: Tensor, h: int, w: int) -> Tensor:
        if self.kind == "ef_att":
            grid = ops.reshape(normed, (h, w, self.d_model))
            return ef_att(grid, self.attn, self.spec)
        q = self.attn.w_q(normed)
        k = self.attn.w_k(normed)
        v = self.attn.w_v(normed)
        if self.kind == "efficient_only":
            return efficient_attention(q, k, v, self.attn.heads)
        return reference_self_attention(q, k, v, self.attn.heads)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        if x.shape[0] != h * w:
            raise ShapeError(f"token count {x.shape[0]} != grid {h}x{w}")
        att = self.attention(self.ln1(x), h, w)
        y = ops.add(ops.add(x, att), des(x, self.attn.des)) \
            if self.attn.des is not None else ops.add(x, att)
        return ops.add(y, self.ffn(self.ln2(y), h, w))
