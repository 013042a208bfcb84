"""Procedurally generated image-classification data for the toy ViT."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("bars", "checkers", "blobs", "gradients")


@dataclass
class ToyDataset:
    images: np.ndarray  # (M, H, W, C) in [0, 1]
    labels: np.ndarray  # (M,) int

    def __len__(self) -> int:
        return len(self.labels)


def _bars(rng, s):
    period = rng.integers(2, 5)
    phase = rng.integers(0, period)
    coord = np.arange(s)[:, None] if rng.random() < 0.5 else np.arange(s)[None, :]
    return ((coord + phase) // max(period // 2, 1) % 2 == 0).astype(float) * np.ones((s, s))


def _checkers(rng, s):
    cell = rng.integers(2, 5)
    oy, ox = rng.integers(0, cell, size=2)
    yy, xx = np.mgrid[0:s, 0:s]
    return (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(float)


def _blobs(rng, s):
    yy, xx = np.mgrid[0:s, 0:s]
    img = np.zeros((s, s))
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(2, s - 2, size=2)
        r = rng.uniform(1.5, 3.5)
        img = np.maximum(img, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
    return img


def _gradients(rng, s):
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1) - 0.5
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    return (ramp - ramp.min()) / (ramp.max() - ramp.min())


_MAKERS = (_bars, _checkers, _blobs, _gradients)


def make_shapes_dataset(n: int, image_size: int = 16, channels: int = 3, seed: int = 0,
                        num_classes: int = 4, noise: float = 0.05) -> ToyDataset:
    """Balanced dataset of bars / checkers / blobs / gradients images.

    Each pattern is tinted with random foreground and background colours and
    perturbed by Gaussian pixel noise.  ``num_classes`` < 4 uses the first
    classes only.
    """
    if not 1 <= num_classes <= len(_MAKERS):
        raise ValueError(f"num_classes must be in [1, {len(_MAKERS)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, image_size, image_size, channels))
    for i, c in enumerate(labels):
        pattern = _MAKERS[c](rng, image_size)[..., None]
        fg = rng.uniform(0.5, 1.0, channels)
        bg = rng.uniform(0.0, 0.4, channels)
        img = bg + pattern * (fg - bg) + rng.normal(0.0, noise, (image_size, image_size, channels))
        images[i] = np.clip(img, 0.0, 1.0)
    return ToyDataset(images, labels.astype(np.int64))
