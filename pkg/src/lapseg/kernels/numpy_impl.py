"""Pure-numpy reference build of the depthwise correlation kernels.

Taps are accumulated in fixed (row, column) order so results match the
numba build bit for bit.
"""

from __future__ import annotations

import numpy as np


def corr2d_valid(xp: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid-mode per-channel 2-D cross-correlation.

    xp: padded input (Hp, Wp, C); k: per-channel kernel (kh, kw, C).
    """
    kh, kw, c = k.shape
    h = xp.shape[0] - kh + 1
    w = xp.shape[1] - kw + 1
    out = np.zeros((h, w, c), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            out += xp[a : a + h, b : b + w, :] * k[a, b, :]
    return out


def corr2d_grad_x(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Gradient of corr2d_valid w.r.t. the padded input."""
    kh, kw, _ = k.shape
    h, w, c = g.shape
    gxp = np.zeros((h + kh - 1, w + kw - 1, c), dtype=g.dtype)
    for a in range(kh):
        for b in range(kw):
            gxp[a : a + h, b : b + w, :] += g * k[a, b, :]
    return gxp


def corr2d_grad_k(xp: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Gradient of corr2d_valid w.r.t. the kernel."""
    h, w, c = g.shape
    gk = np.zeros((kh, kw, c), dtype=g.dtype)
    for a in range(kh):
        for b in range(kw):
            gk[a, b, :] = np.sum(xp[a : a + h, b : b + w, :] * g, axis=(0, 1))
    return gk


def corr1d_valid(xp: np.ndarray, k1: np.ndarray, axis: int) -> np.ndarray:
    """Valid 1-D correlation along axis 0 or 1 of (Hp, Wp, C).

    One shared kernel for all channels (separable Gaussian blur path).
    """
    kl = k1.shape[0]
    if axis == 0:
        h = xp.shape[0] - kl + 1
        out = np.zeros((h,) + xp.shape[1:], dtype=xp.dtype)
        for t in range(kl):
            out += xp[t : t + h] * k1[t]
    else:
        w = xp.shape[1] - kl + 1
        out = np.zeros((xp.shape[0], w, xp.shape[2]), dtype=xp.dtype)
        for t in range(kl):
            out += xp[:, t : t + w] * k1[t]
    return out


def scatter_axis0(t: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Accumulate padded rows back onto their source rows (adjoint of a
    reflect gather along axis 0)."""
    out = np.zeros((n,) + t.shape[1:], dtype=t.dtype)
    for u in range(t.shape[0]):
        out[idx[u]] += t[u]
    return out


def scatter_axis1(t: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((t.shape[0], n, t.shape[2]), dtype=t.dtype)
    for u in range(t.shape[1]):
        out[:, idx[u]] += t[:, u]
    return out


def corr1d_grad_x(g: np.ndarray, k1: np.ndarray, axis: int) -> np.ndarray:
    """Gradient of corr1d_valid w.r.t. the padded input."""
    kl = k1.shape[0]
    if axis == 0:
        h = g.shape[0]
        gxp = np.zeros((h + kl - 1,) + g.shape[1:], dtype=g.dtype)
        for t in range(kl):
            gxp[t : t + h] += g * k1[t]
    else:
        w = g.shape[1]
        gxp = np.zeros((g.shape[0], w + kl - 1, g.shape[2]), dtype=g.dtype)
        for t in range(kl):
            gxp[:, t : t + w] += g * k1[t]
    return gxp
