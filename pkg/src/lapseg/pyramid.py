"""Gaussian smoothing and same-resolution Laplacian pyramids.

A pyramid of a feature map x is built from progressively blurred copies
G_0..G_L, with G_0 = x (identity) and G_l = blur(x, sigma_l) for a strictly
increasing sigma schedule. Band l is G_l - G_{l+1}; the residual is G_L.
The stack telescopes: sum(bands) + residual == x exactly, so no
information is lost.

Blurring is separable: unit-sum 1-D kernels along rows then columns equal
the 2-D kernel result under reflect padding (the index maps factorise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, _wrap


@dataclass(frozen=True)
class GaussianSpec:
    """Blur schedule for one pyramid: band-pass levels 1..L plus residual.

    sigmas must be positive and strictly increasing; level 0 is always the
    identity (sigma 0). Kernels are truncated at ``ceil(truncation * sigma)``
    and renormalised to unit sum so constants survive blurring exactly.
    """

    sigmas: tuple = (1.0, 2.0, 4.0)
    truncation: float = 3.0

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        if not sig:
            raise ValueError("GaussianSpec needs at least one sigma")
        if any(s <= 0 for s in sig):
            raise ValueError(f"sigmas must be positive, got {sig}")
        if any(b <= a for a, b in zip(sig, sig[1:])):
            raise ValueError(f"sigmas must be strictly increasing, got {sig}")
        object.__setattr__(self, "sigmas", sig)

    @property
    def levels(self) -> int:
        """Number of band-pass levels L."""
        return len(self.sigmas)

    def radius(self, sigma: float) -> int:
        return int(math.ceil(self.truncation * sigma))


@dataclass
class PyramidStack:
    """L band-pass maps plus the coarsest Gaussian residual."""

    bands: list
    residual: Tensor

    @property
    def levels(self):
        """All L+1 level features: bands first, residual last."""
        return list(self.bands) + [self.residual]


def gaussian_kernel(sigma: float, radius: int, dtype=np.float32) -> Tensor:
    """(2r+1) x (2r+1) kernel with values prop. to exp(-(i^2+j^2)/(2 sigma^2)),
    renormalised to unit sum."""
    if sigma <= 0:
        raise ValueError(f"gaussian_kernel needs sigma > 0, got {sigma}")
    r = int(radius)
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g1 = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = np.outer(g1, g1)
    k /= k.sum()
    return _wrap(k.astype(dtype), False)


def _gaussian_kernel_1d(sigma: float, radius: int, dtype) -> Tensor:
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    g /= g.sum()
    return _wrap(g.astype(dtype), False)


def gaussian_blur(x: Tensor, sigma: float, truncation: float = 3.0) -> Tensor:
    """Channelwise Gaussian blur of an (H, W, C) map, reflect padded.

    sigma == 0 returns the input unchanged. Runs as two 1-D passes, which
    matches the full 2-D convolution exactly under reflect padding.
    """
    if sigma < 0:
        raise ValueError(f"gaussian_blur needs sigma >= 0, got {sigma}")
    if x.ndim != 3:
        raise ShapeError(f"gaussian_blur expects (H, W, C), got {x.shape}")
    if sigma == 0:
        return x
    r = int(math.ceil(truncation * sigma))
    if r == 0:
        return x
    k1 = _gaussian_kernel_1d(sigma, r, x.dtype)
    return ops.separable_blur(x, k1, r)


def build_pyramid(x: Tensor, spec: GaussianSpec) -> PyramidStack:
    """Decompose x into band-pass levels (G_l - G_{l+1}) and residual G_L."""
    levels = [x]
    for sigma in spec.sigmas:
        levels.append(gaussian_blur(x, sigma, spec.truncation))
    bands = [ops.sub(levels[l], levels[l + 1]) for l in range(len(spec.sigmas))]
    return PyramidStack(bands=bands, residual=levels[-1])


def reconstruct(p: PyramidStack) -> Tensor:
    """sum(bands) + residual; inverse of build_pyramid by telescoping."""
    out = p.residual
    for band in p.bands:
        if band.shape != p.residual.shape:
            raise ShapeError(
                f"band shape {band.shape} != residual shape {p.residual.shape}"
            )
        out = ops.add(out, band)
    return out
