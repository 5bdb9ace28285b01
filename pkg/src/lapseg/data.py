"""Synthetic texture-segmentation data, image ingestion and dataset I/O.

Samples are grayscale images whose classes share one mean intensity and
differ only in texture frequency: the background carries a low-frequency
sinusoid, blob interiors a high-frequency one, both at the same amplitude
and under the same additive noise field. Shape alone cannot solve the
task; frequency content can. Blobs are smooth random-walk radial contours
rescaled until class pixel counts are balanced.

Everything is deterministic: sample i uses seed ``manifest.seed + i``
(test samples continue the index range after the train split), so a
dataset can be regenerated bit-identically from its manifest alone.
"""

from __future__ import annotations

import os
import typing
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensorio import load_tensor, save_tensor


class DataError(RuntimeError):
    pass


@dataclass
class DatasetManifest:
    height: int = 64
    width: int = 64
    num_classes: int = 2
    train_samples: int = 400
    test_samples: int = 100
    blob_count_min: int = 1
    blob_count_max: int = 2
    freq_bg: float = 3.0
    freq_fg: float = 20.0
    texture_amp: float = 0.35
    noise_sigma: float = 0.02
    balance_tol: float = 0.2
    seed: int = 1234

    def validate(self):
        if self.height < 8 or self.width < 8:
            raise DataError("image too small")
        if self.num_classes < 2:
            raise DataError("need at least 2 classes")
        if not 0 <= self.blob_count_min <= self.blob_count_max:
            raise DataError("bad blob count range")
        if self.freq_bg <= 0 or self.freq_fg <= self.freq_bg:
            raise DataError("need 0 < freq_bg < freq_fg")
        if not 0 < self.texture_amp <= 0.45:
            raise DataError("texture_amp must be in (0, 0.45]")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        return self

    def to_file(self, path):
        with open(path, "w") as fh:
            for key, value in asdict(self).items():
                fh.write(f"{key} = {value}\n")

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        fields = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                fields[key.strip()] = value.strip()
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for name, typ in hints.items():
            if name in fields:
                kwargs[name] = typ(fields[name])
        unknown = set(fields) - set(hints)
        if unknown:
            raise DataError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**kwargs).validate()


@dataclass
class SampleRecord:
    image: np.ndarray   # (H, W, 1) float32 in [0, 1]
    mask: np.ndarray    # (H, W) int32 class ids
    seed: int


def _blob_mask(rng, h, w, radius, n_angles=256):
    """Boolean mask of one smooth random-walk blob."""
    cy = rng.uniform(0.3, 0.7) * h
    cx = rng.uniform(0.3, 0.7) * w
    steps = rng.normal(size=n_angles)
    walk = np.cumsum(steps)
    walk -= np.linspace(walk[0], walk[-1], n_angles)  # close the contour
    smooth = np.convolve(np.concatenate([walk, walk, walk]),
                         np.ones(31) / 31, mode="same")[n_angles:2 * n_angles]
    spread = smooth.std()
    if spread > 0:
        smooth = (smooth - smooth.mean()) / spread
    r_profile = radius * np.clip(1.0 + 0.3 * smooth, 0.35, 1.8)
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    ang = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    idx = np.minimum((ang / (2 * np.pi) * n_angles).astype(np.intp), n_angles - 1)
    return np.hypot(dy, dx) < r_profile[idx]


def generate_sample(manifest: DatasetManifest, seed: int) -> SampleRecord:
    m = manifest
    rng = np.random.default_rng(seed)
    h, w, k = m.height, m.width, m.num_classes
    n_blobs = int(rng.integers(m.blob_count_min, m.blob_count_max + 1))

    mask = np.zeros((h, w), dtype=np.int32)
    if n_blobs > 0:
        target = h * w / k          # pixels per class
        scale = 1.0
        lo = 1.0 - m.balance_tol
        for _ in range(80):
            mask[:] = 0
            for c in range(1, k):
                base_r = np.sqrt(target / (np.pi * n_blobs)) * scale
                for _ in range(n_blobs):
                    blob = _blob_mask(rng, h, w, base_r)
                    mask[blob] = c
            counts = np.bincount(mask.ravel(), minlength=k).astype(np.float64)
            if counts.min() > 0 and counts.min() / counts.max() >= lo:
                break
            fg = counts[1:].sum()
            if fg > 0:
                scale = float(np.clip(scale * np.sqrt(target * (k - 1) / fg),
                                      0.4, 2.5))
        else:
            raise DataError(f"could not balance classes for seed {seed}")

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w), dtype=np.float64)
    for c in range(k):
        if k == 2:
            freq = m.freq_bg if c == 0 else m.freq_fg
        else:
            freq = m.freq_bg + (m.freq_fg - m.freq_bg) * c / (k - 1)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + m.texture_amp * np.sin(
            2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / w + phase
        )
        region = mask == c
        img[region] = wave[region]
        # re-centre each region so intensity means carry no class signal
        if region.any():
            img[region] += 0.5 - img[region].mean()
    if m.noise_sigma > 0:
        img += m.noise_sigma * rng.normal(size=(h, w))
    img = np.clip(img, 0.0, 1.0)
    return SampleRecord(image=img.astype(np.float32)[:, :, None],
                        mask=mask, seed=seed)


def gen_texture_dataset(manifest: DatasetManifest, split: str = "train"):
    """Generate one split; sample i derives its seed as manifest.seed + index."""
    manifest.validate()
    if split == "train":
        offset, count = 0, manifest.train_samples
    elif split == "test":
        offset, count = manifest.train_samples, manifest.test_samples
    else:
        raise DataError(f"unknown split {split!r}")
    return [generate_sample(manifest, manifest.seed + offset + i)
            for i in range(count)]


def write_dataset(out_dir, manifest: DatasetManifest):
    """Materialise both splits as numbered tensor files plus the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    manifest.to_file(os.path.join(out_dir, "manifest.cfg"))
    for split in ("train", "test"):
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        for i, sample in enumerate(gen_texture_dataset(manifest, split)):
            save_tensor(os.path.join(split_dir, f"{i:05d}.image.lpt"), sample.image)
            save_tensor(os.path.join(split_dir, f"{i:05d}.mask.lpt"), sample.mask)


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG into (H, W, C) floats in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                raise DataError(
                    f"{path}: unsupported image mode {img.mode!r} (need 8-bit L or RGB)"
                )
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (FileNotFoundError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_input_tensor(path) -> np.ndarray:
    """Read either a tensor file or a PNG image as a float (H, W, C) map."""
    if str(path).endswith(".lpt"):
        arr = load_tensor(path).astype(np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DataError(f"{path}: expected a rank-2 or rank-3 tensor")
        return arr
    return load_image(path)
