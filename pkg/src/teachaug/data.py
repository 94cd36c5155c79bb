"""Datasets: a seeded coloured-shapes generator, the small-image binary format, batching."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .augment import ImageBatch
from .errors import ConfigError, FormatError

SHAPES = ("disc", "square", "triangle")
# per-class RGB centre of the foreground colour; jittered by +-palette_jitter
PALETTE = ((0.85, 0.30, 0.25), (0.25, 0.80, 0.30), (0.30, 0.35, 0.90))
RECORD_BYTES = 1 + 32 * 32 * 3


@dataclass
class Dataset:
    images: np.ndarray            # [N, H, W, 3] float32 in [0, 1]
    labels: np.ndarray            # [N] int64
    num_classes: int
    split: str = "all"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ConfigError(f"images must be [N, H, W, 3], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ConfigError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def onehot(self, idx=slice(None)) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels[idx]]

    def subset(self, idx, split: str | None = None) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)


@dataclass
class ShapesSpec:
    n: int = 2500
    height: int = 32
    width: int = 32
    num_classes: int = 3
    palette_jitter: float = 0.12
    background_noise: float = 0.04
    seed: int = 0
    palette: tuple = field(default=PALETTE)

    def validate(self) -> None:
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must be 1..{len(SHAPES)}, got {self.num_classes}")
        if self.n < 0:
            raise ConfigError("n must be non-negative")
        if min(self.height, self.width) < 4:
            raise ConfigError("images must be at least 4x4")
        if len(self.palette) < self.num_classes:
            raise ConfigError("palette needs one colour per class")


def _mask(shape: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        half = 0.85 * r
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    # upward triangle: apex at top, base at the bottom
    top, bottom = cy - r, cy + 0.8 * r
    frac = (dy + r) / (1.8 * r)
    return (yy >= top) & (yy <= bottom) & (np.abs(dx) <= frac * r)


def generate_shapes(spec: ShapesSpec) -> Dataset:
    """Class = shape; foreground colour from a class-specific range."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w, k = spec.height, spec.width, spec.num_classes
    images = np.empty((spec.n, h, w, 3), dtype=np.float32)
    labels = rng.integers(0, k, size=spec.n)
    for i, lab in enumerate(labels):
        r = rng.uniform(0.22, 0.38) * min(h, w)
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        bg = rng.uniform(0.35, 0.6)
        fg = np.clip(np.asarray(spec.palette[lab]) + rng.uniform(-1, 1, 3) * spec.palette_jitter, 0, 1)
        img = np.full((h, w, 3), bg) + rng.normal(0, spec.background_noise, (h, w, 3))
        img[_mask(SHAPES[lab], h, w, cy, cx, r)] = fg
        images[i] = np.clip(img, 0, 1)
    return Dataset(images, labels.astype(np.int64), k)


def train_test_split(data: Dataset, n_test: int) -> tuple[Dataset, Dataset]:
    """Last ``n_test`` samples form the test split (the generator is already shuffled)."""
    if not 0 <= n_test <= len(data):
        raise ConfigError(f"n_test={n_test} out of range for {len(data)} samples")
    cut = len(data) - n_test
    return data.subset(slice(0, cut), "train"), data.subset(slice(cut, None), "test")


# ---------------------------------------------------------------------------
# binary format: records of 1 label byte + 3072 channel-planar pixel bytes
# ---------------------------------------------------------------------------
def read_cifar_binary(path, num_classes: int = 10) -> Dataset:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        offset = raw.size - raw.size % RECORD_BYTES
        raise FormatError(f"{path}: truncated record at byte offset {offset} "
                          f"({raw.size % RECORD_BYTES} of {RECORD_BYTES} bytes present)")
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"{path}: label {labels[bad]} at byte offset {bad * RECORD_BYTES} "
                          f">= {num_classes}")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset((pixels / np.float32(255.0)).astype(np.float32), labels, num_classes)


def write_cifar_binary(data: Dataset, path) -> None:
    if data.images.shape[1:] != (32, 32, 3):
        raise FormatError(f"binary format holds 32x32 RGB images, got {data.images.shape[1:]}")
    px = np.rint(np.clip(data.images, 0, 1) * 255).astype(np.uint8).transpose(0, 3, 1, 2)
    rec = np.concatenate([data.labels.astype(np.uint8)[:, None], px.reshape(len(data), -1)], axis=1)
    tmp = f"{path}.tmp"
    rec.tofile(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------
def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Per-(seed, epoch) permutation cut into full batches; the remainder is dropped."""
    if batch_size < 2:
        raise ConfigError("batch size must be at least 2")
    if batch_size > n:
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    nb = n // batch_size
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(nb)]


def batches(data: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[ImageBatch]:
    for idx in batch_indices(len(data), batch_size, seed, epoch):
        yield ImageBatch(data.images[idx], data.onehot(idx))
