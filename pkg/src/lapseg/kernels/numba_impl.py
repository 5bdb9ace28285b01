"""Numba ``@njit`` build of the depthwise correlation kernels.

Loop nests mirror the tap order of :mod:`lapseg.kernels.numpy_impl`
(fastmath stays off; no FMA contraction) so the two builds agree bitwise.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def corr2d_valid(xp, k):
    kh, kw, c = k.shape
    h = xp.shape[0] - kh + 1
    w = xp.shape[1] - kw + 1
    out = np.zeros((h, w, c), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        out[i, j, ch] += xp[i + a, j + b, ch] * k[a, b, ch]
    return out


@njit(cache=True)
def corr2d_grad_x(g, k):
    kh, kw, _ = k.shape
    h, w, c = g.shape
    gxp = np.zeros((h + kh - 1, w + kw - 1, c), dtype=g.dtype)
    for a in range(kh):
        for b in range(kw):
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        gxp[i + a, j + b, ch] += g[i, j, ch] * k[a, b, ch]
    return gxp


@njit(cache=True)
def corr2d_grad_k(xp, g, kh, kw):
    h, w, c = g.shape
    gk = np.zeros((kh, kw, c), dtype=g.dtype)
    for a in range(kh):
        for b in range(kw):
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        gk[a, b, ch] += xp[i + a, j + b, ch] * g[i, j, ch]
    return gk


@njit(cache=True)
def corr1d_valid(xp, k1, axis):
    kl = k1.shape[0]
    if axis == 0:
        h = xp.shape[0] - kl + 1
        out = np.zeros((h, xp.shape[1], xp.shape[2]), dtype=xp.dtype)
        for t in range(kl):
            for i in range(h):
                for j in range(xp.shape[1]):
                    for ch in range(xp.shape[2]):
                        out[i, j, ch] += xp[i + t, j, ch] * k1[t]
    else:
        w = xp.shape[1] - kl + 1
        out = np.zeros((xp.shape[0], w, xp.shape[2]), dtype=xp.dtype)
        for t in range(kl):
            for i in range(xp.shape[0]):
                for j in range(w):
                    for ch in range(xp.shape[2]):
                        out[i, j, ch] += xp[i, j + t, ch] * k1[t]
    return out


@njit(cache=True)
def scatter_axis0(t, idx, n):
    out = np.zeros((n, t.shape[1], t.shape[2]), dtype=t.dtype)
    for u in range(t.shape[0]):
        i = idx[u]
        for j in range(t.shape[1]):
            for ch in range(t.shape[2]):
                out[i, j, ch] += t[u, j, ch]
    return out


@njit(cache=True)
def scatter_axis1(t, idx, n):
    out = np.zeros((t.shape[0], n, t.shape[2]), dtype=t.dtype)
    for u in range(t.shape[1]):
        j = idx[u]
        for i in range(t.shape[0]):
            for ch in range(t.shape[2]):
                out[i, j, ch] += t[i, u, ch]
    return out


@njit(cache=True)
def corr1d_grad_x(g, k1, axis):
    kl = k1.shape[0]
    if axis == 0:
        h = g.shape[0]
        gxp = np.zeros((h + kl - 1, g.shape[1], g.shape[2]), dtype=g.dtype)
        for t in range(kl):
            for i in range(h):
                for j in range(g.shape[1]):
                    for ch in range(g.shape[2]):
                        gxp[i + t, j, ch] += g[i, j, ch] * k1[t]
    else:
        w = g.shape[1]
        gxp = np.zeros((g.shape[0], w + kl - 1, g.shape[2]), dtype=g.dtype)
        for t in range(kl):
            for i in range(g.shape[0]):
                for j in range(w):
                    for ch in range(g.shape[2]):
                        gxp[i, j + t, ch] += g[i, j, ch] * k1[t]
    return gxp
