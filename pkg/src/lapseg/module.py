"""Tiny parameter-container layer: modules own Tensors, walk them by name.

Parameter discovery follows attribute insertion order (dicts are ordered),
so two identically-constructed modules enumerate identically; checkpoints
and the optimizer rely on that.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Tensor, _wrap


class Module:
    def named_parameters(self, prefix: str = ""):
        """Yield (dotted name, tensor) for every parameter, depth first."""
        for name, value in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            yield from _walk(path, value)

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())


def _walk(path, value):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{path}.{i}", item)


def param(rng: np.random.Generator, shape, scale: float, dtype) -> Tensor:
    data = (rng.normal(size=shape) * scale).astype(dtype)
    return _wrap(data, True)


def glorot_scale(fan_in: int, fan_out: int) -> float:
    return math.sqrt(2.0 / (fan_in + fan_out))


class Linear(Module):
    """y = x @ w (+ b); x has features along the last axis."""

    def __init__(self, rng, d_in, d_out, bias=True, dtype=np.float32, gain=1.0):
        self.w = param(rng, (d_in, d_out), gain * glorot_scale(d_in, d_out), dtype)
        self.b = _wrap(np.zeros(d_out, dtype=dtype), True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-6, dtype=np.float32):
        self.gain = _wrap(np.ones(d, dtype=dtype), True)
        self.bias = _wrap(np.zeros(d, dtype=dtype), True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class DepthwiseConv2d(Module):
    """Same-size per-channel conv on an (H, W, C) map, reflect padded."""

    def __init__(self, rng, channels, kh=3, kw=3, bias=True, dtype=np.float32):
        self.k = param(rng, (kh, kw, channels), math.sqrt(1.0 / (kh * kw)), dtype)
        self.b = _wrap(np.zeros(channels, dtype=dtype), True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.depthwise_conv2d(x, self.k)
        if self.b is not None:
            y = ops.add(y, self.b)
        return y
