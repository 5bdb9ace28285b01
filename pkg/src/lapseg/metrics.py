"""Segmentation evaluation metrics: Dice similarity, boundary Hausdorff
distance (plain, with an HD95 variant), and confusion-matrix rates."""

from __future__ import annotations

import math

import numpy as np


def dsc_metric(pred: np.ndarray, gt: np.ndarray, num_classes: int):
    """Per-class and mean Dice 2|A&B| / (|A|+|B|) over hard label maps.

    A class absent from both maps scores 1.0 (nothing to get wrong).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    scores = np.zeros(num_classes)
    for c in range(num_classes):
        a = pred == c
        b = gt == c
        denom = a.sum() + b.sum()
        scores[c] = 1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom
    return scores, float(scores.mean())


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(M, 2) coordinates of foreground pixels with a 4-neighbour outside the
    mask; pixels on the image border count as boundary."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def _directed_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """min distance from each point of a to the set b (Euclidean, pixels)."""
    diff = a[:, None, :].astype(np.float64) - b[None, :, :].astype(np.float64)
    return np.sqrt((diff * diff).sum(axis=2)).min(axis=1)


def hausdorff(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric Hausdorff distance between the two masks' boundary sets.

    Foreground is any nonzero label. If either mask is empty the distance
    is defined as the image diagonal.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a = boundary_pixels(pred != 0)
    b = boundary_pixels(gt != 0)
    if len(a) == 0 or len(b) == 0:
        h, w = pred.shape
        return math.hypot(h - 1, w - 1)
    return float(max(_directed_distances(a, b).max(),
                     _directed_distances(b, a).max()))


def hausdorff95(pred: np.ndarray, gt: np.ndarray) -> float:
    """95th-percentile variant: max over directions of the 95th percentile
    of directed boundary distances. Not claimed to match any published
    evaluation protocol."""
    a = boundary_pixels(pred != 0)
    b = boundary_pixels(gt != 0)
    if len(a) == 0 or len(b) == 0:
        h, w = pred.shape
        return math.hypot(h - 1, w - 1)
    return float(max(np.percentile(_directed_distances(a, b), 95),
                     np.percentile(_directed_distances(b, a), 95)))


def confusion_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    """Sensitivity, specificity and accuracy of foreground-vs-background.

    Degenerate denominators (no positives / no negatives in gt) score 1.0.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred != 0
    g = gt != 0
    tp = float(np.logical_and(p, g).sum())
    tn = float(np.logical_and(~p, ~g).sum())
    fp = float(np.logical_and(p, ~g).sum())
    fn = float(np.logical_and(~p, g).sum())
    se = tp / (tp + fn) if (tp + fn) > 0 else 1.0
    sp = tn / (tn + fp) if (tn + fp) > 0 else 1.0
    acc = (tp + tn) / (tp + tn + fp + fn)
    return {"se": se, "sp": sp, "acc": acc}
