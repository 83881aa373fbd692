"""Procedural image datasets.

Each class is a local texture: a sinusoidal grating with class-specific
orientation and period, tinted with a class palette, plus per-image phase
jitter and pixel noise.  Texture classes are deliberately local so a model
whose receptive field is much smaller than the image can solve them, which
is the regime the masked-inference engine is built for.

Images are float32 in [0, 1], channels last, fully determined by
(dataset, split, index, seed).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    image_size: int
    n_classes: int
    noise: float = 0.10


DATASETS = {
    "synth10": DatasetSpec(name="synth10", image_size=32, n_classes=10),
    "synth4": DatasetSpec(name="synth4", image_size=16, n_classes=4),
}

_SPLIT_SALT = {"train": 0, "val": 1, "test": 2}


def _palette(spec: DatasetSpec, label: int) -> np.ndarray:
    # crc32, not hash(): palettes must not depend on PYTHONHASHSEED
    rng = np.random.default_rng(np.random.SeedSequence([zlib.crc32(spec.name.encode()), label]))
    base = rng.uniform(0.25, 1.0, size=3)
    return base / base.max()


def generate_image(spec: DatasetSpec, split: str, index: int, label: int, seed: int) -> np.ndarray:
    """One image for (split, index) with the texture of ``label``."""
    if split not in _SPLIT_SALT:
        raise ValueError(f"unknown split {split!r}; use train/val/test")
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, _SPLIT_SALT[split], index, label])
    )
    n = spec.image_size
    theta = np.pi * label / spec.n_classes
    period = 3.0 + (label % 5)
    fx, fy = np.cos(theta) / period, np.sin(theta) / period
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:n, 0:n]
    grating = 0.5 + 0.5 * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    img = grating[:, :, None] * _palette(spec, label)[None, None, :]
    img = img + rng.uniform(-spec.noise, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_split(
    dataset_id: str, split: str, count: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """``count`` images and labels, classes round-robin."""
    if dataset_id not in DATASETS:
        raise ValueError(f"unknown dataset {dataset_id!r}; have {sorted(DATASETS)}")
    spec = DATASETS[dataset_id]
    labels = np.array([i % spec.n_classes for i in range(count)], dtype=np.int64)
    images = np.stack(
        [generate_image(spec, split, i, int(labels[i]), seed) for i in range(count)]
    ) if count else np.zeros((0, spec.image_size, spec.image_size, 3), np.float32)
    return images, labels
