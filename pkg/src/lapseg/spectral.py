"""Frequency-response analysis of feature maps.

The retention metric is the fraction of non-DC spectral energy outside a
radial cutoff (default half the Nyquist radius). ``layerwise_probe`` runs
a model over a probe batch, captures every transformer layer's output on
its spatial grid, and reports per-layer low/high band energy and the
retention ratio, plus a radial energy profile so other cutoffs can be
evaluated after the fact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import _wrap


def fft2_magnitude(x: np.ndarray) -> np.ndarray:
    """|2-D DFT| of a real (H, W) map, shifted so DC sits at the grid centre."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"fft2_magnitude expects (H, W), got {x.shape}")
    return np.abs(np.fft.fftshift(np.fft.fft2(x)))


def _radial_grid(h: int, w: int) -> np.ndarray:
    """Radius of each centred bin in units of the per-axis Nyquist frequency."""
    fy = (np.arange(h) - h // 2) / (h / 2.0)
    fx = (np.arange(w) - w // 2) / (w / 2.0)
    return np.hypot(fy[:, None], fx[None, :])


def band_energies(x: np.ndarray, cutoff: float = 0.5) -> tuple[float, float]:
    """(low, high) spectral energy of an (H, W) or (H, W, C) map, DC excluded,
    summed over channels. High is everything outside the cutoff disk."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    h, w, _ = x.shape
    r = _radial_grid(h, w)
    inside = r <= cutoff
    low = high = 0.0
    for c in range(x.shape[2]):
        power = fft2_magnitude(x[:, :, c]) ** 2
        power[h // 2, w // 2] = 0.0
        low += float(power[inside].sum())
        high += float(power[~inside].sum())
    return low, high


def high_freq_ratio(x: np.ndarray, cutoff: float = 0.5) -> float:
    """Mean over channels of high / (high + low) band energy.

    Channels with no non-DC energy contribute 0 by convention.
    """
    if not 0.0 < cutoff < 1.0:
        raise ValueError(f"cutoff must be in (0, 1), got {cutoff}")
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    ratios = []
    for c in range(x.shape[2]):
        low, high = band_energies(x[:, :, c], cutoff)
        total = low + high
        ratios.append(high / total if total > 0 else 0.0)
    return float(np.mean(ratios))


def radial_profile(x: np.ndarray, n_bins: int | None = None):
    """(bin centres, energy per bin) of the non-DC spectrum, channel-summed.

    Radii are normalised to the per-axis Nyquist; the corner bin sits at
    sqrt(2)."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    h, w, _ = x.shape
    if n_bins is None:
        n_bins = max(4, max(h, w) // 2)
    r = _radial_grid(h, w)
    edges = np.linspace(0.0, np.sqrt(2.0), n_bins + 1)
    which = np.clip(np.digitize(r, edges) - 1, 0, n_bins - 1)
    energy = np.zeros(n_bins)
    for c in range(x.shape[2]):
        power = fft2_magnitude(x[:, :, c]) ** 2
        power[h // 2, w // 2] = 0.0
        energy += np.bincount(which.ravel(), weights=power.ravel(),
                              minlength=n_bins)
    centres = 0.5 * (edges[:-1] + edges[1:])
    return centres, energy


@dataclass
class LayerSpectrum:
    index: int
    name: str
    low: float
    high: float
    profile_centres: np.ndarray
    profile_energy: np.ndarray

    @property
    def ratio(self) -> float:
        total = self.low + self.high
        return self.high / total if total > 0 else 0.0


@dataclass
class SpectralReport:
    tag: str
    rows: list

    def ratios(self) -> list:
        return [row.ratio for row in self.rows]


def layerwise_probe(model, batch, cutoff: float = 0.5,
                    tag: str = "model") -> SpectralReport:
    """Capture every transformer layer's output over a probe batch and
    aggregate band energies (summed over channels and samples) per layer,
    in depth order."""
    per_layer: dict[str, dict] = {}
    order: list[str] = []
    for image in batch:
        arr = np.asarray(image.data if hasattr(image, "data") else image)
        capture: list = []
        model.forward(_wrap(arr.astype(model.cfg.np_dtype), False), capture=capture)
        for name, tokens, h, w in capture:
            grid = tokens.data.reshape(h, w, -1)
            low, high = band_energies(grid, cutoff)
            centres, energy = radial_profile(grid)
            slot = per_layer.get(name)
            if slot is None:
                order.append(name)
                per_layer[name] = {"low": low, "high": high,
                                   "centres": centres, "energy": energy}
            else:
                slot["low"] += low
                slot["high"] += high
                slot["energy"] = slot["energy"] + energy
    if not order:
        raise ValueError("model produced no transformer-layer captures")
    rows = [
        LayerSpectrum(index=i, name=name,
                      low=per_layer[name]["low"], high=per_layer[name]["high"],
                      profile_centres=per_layer[name]["centres"],
                      profile_energy=per_layer[name]["energy"])
        for i, name in enumerate(order)
    ]
    return SpectralReport(tag=tag, rows=rows)


def write_report_csv(report: SpectralReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "name", "low", "high", "ratio"])
        for row in report.rows:
            writer.writerow([row.index, row.name,
                             f"{row.low:.9e}", f"{row.high:.9e}",
                             f"{row.ratio:.9f}"])


def write_radial_csvs(report: SpectralReport, out_dir, prefix: str):
    import os

    paths = []
    for row in report.rows:
        path = os.path.join(out_dir, f"{prefix}_radial_layer{row.index:02d}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["radius", "energy"])
            for r, e in zip(row.profile_centres, row.profile_energy):
                writer.writerow([f"{r:.6f}", f"{e:.9e}"])
        paths.append(path)
    return paths
