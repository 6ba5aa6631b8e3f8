"""Synthetic segmentation data: squares and circles on a noisy background."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TASKS = ("shapes-seg",)
BACKGROUND, SQUARE, CIRCLE = 0, 1, 2
NUM_CLASSES = 3


@dataclass
class Dataset:
    images: np.ndarray  # (N, R, R, 1) float32 in [0, 1]
    labels: np.ndarray  # (N, R, R) int32

    def __len__(self) -> int:
        return len(self.images)

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def _draw_sample(rng: np.random.Generator, res: int):
    img = rng.uniform(0.0, 0.35, size=(res, res)).astype(np.float32)
    lab = np.zeros((res, res), np.int32)
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    # one shape of each kind, then optional extras
    kinds = [SQUARE, CIRCLE] + list(rng.integers(1, 3, size=rng.integers(0, 2)))
    for kind in kinds:
        half = rng.uniform(res / 10, res / 5)
        cy, cx = rng.uniform(half, res - half, size=2)
        if kind == SQUARE:
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= half ** 2
        img[mask] = rng.uniform(0.55, 1.0) + rng.uniform(-0.1, 0.1, size=int(mask.sum()))
        lab[mask] = kind
    return np.clip(img, 0.0, 1.0)[..., None], lab


def gen_synthetic(task: str, count: int, resolution: int, seed: int) -> Dataset:
    """Deterministic dataset; every image holds at least one square and one
    circle (later shapes may overlap earlier ones)."""
    if task not in TASKS:
        raise ValueError(f"unsupported task {task!r}; choose from {TASKS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.empty((count, resolution, resolution, 1), np.float32)
    labels = np.empty((count, resolution, resolution), np.int32)
    for i in range(count):
        images[i], labels[i] = _draw_sample(rng, resolution)
    return Dataset(images, labels)


def resize_batch(images: np.ndarray, labels: np.ndarray, resolution: int):
    """Bilinear (align-corners) images and nearest-neighbour labels."""
    src = images.shape[1]
    if src == resolution:
        return images, labels
    pos = np.arange(resolution) * (src - 1) / (resolution - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = (pos - lo).astype(np.float32)
    rows = images[:, lo] * (1 - frac)[None, :, None, None] + images[:, lo + 1] * frac[None, :, None, None]
    out = rows[:, :, lo] * (1 - frac)[None, None, :, None] + rows[:, :, lo + 1] * frac[None, None, :, None]
    near = np.rint(pos).astype(int)
    return out.astype(np.float32), labels[:, near][:, :, near]
