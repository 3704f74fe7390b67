"""Datasets: synthetic 2-d mixtures, CIFAR binary readers, batching.

All inputs entering training live in [-1, 1] (matching the sampler's
uniform init domain); the invariant is asserted at construction. Pixel
bytes map through x / 127.5 - 1, which is exactly invertible for all
256 byte values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Dataset", "CifarFormatError", "BatchIterator",
    "gen_gaussian_mixture_2d", "read_cifar_binary", "cifar10_int",
    "batches", "with_label_noise", "dataset_to_csv", "dataset_from_csv",
]

CIFAR10_RECORD = 3073    # 1 label byte + 3*32*32 pixels
CIFAR100_RECORD = 3074   # coarse + fine label bytes + pixels

INT_NOISE_STD = float(np.sqrt(0.001))  # N(0, 0.001) read as variance 0.001


class CifarFormatError(ValueError):
    """A CIFAR binary file does not follow the published record layout."""


@dataclass
class Dataset:
    x: np.ndarray            # N x D or N x C x H x W, values in [-1, 1]
    y: np.ndarray            # N integer labels in [0, classes)
    classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"dataset: {self.x.shape[0]} inputs vs {self.y.shape[0]} labels")
        if self.x.size and (self.x.min() < -1.0 or self.x.max() > 1.0):
            raise ValueError("dataset: inputs must lie in [-1, 1]")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ValueError(f"dataset: labels must lie in [0, {self.classes})")

    def __len__(self):
        return int(self.x.shape[0])


def gen_gaussian_mixture_2d(n_per_class: int, centers: Sequence, std: float,
                            seed: int, split: str = "train") -> Dataset:
    """Labeled 2-d Gaussian blobs, squeezed into [-1, 1] only when they
    overflow it (centers inside the square stay put as std -> 0)."""
    centers = [tuple(map(float, c)) for c in centers]
    if len(set(centers)) != len(centers):
        raise ValueError("centers must be distinct")
    if std < 0:
        raise ValueError("std must be >= 0")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label, center in enumerate(centers):
        pts = np.asarray(center) + rng.normal(0.0, 1.0, size=(n_per_class, 2)) * std
        xs.append(pts)
        ys.append(np.full(n_per_class, label, dtype=np.int64))
    x = np.vstack(xs)
    scale = max(1.0, float(np.abs(x).max())) if x.size else 1.0
    return Dataset(x / scale, np.concatenate(ys), classes=len(centers), split=split,
                   provenance=f"gaussian_mixture_2d(n={n_per_class}, std={std}, seed={seed})")


def _byte_to_float(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 127.5 - 1.0


def float_to_byte(values: np.ndarray) -> np.ndarray:
    """Inverse pixel mapping; exact for every byte that went in."""
    return np.round((np.asarray(values) + 1.0) * 127.5).astype(np.uint8)


def read_cifar_binary(path, variant: str = "cifar10", split: str = "train") -> Dataset:
    """Parse a CIFAR-10/100 binary batch file into a normalized dataset.

    CIFAR-10 records are 3073 bytes (label, then 3072 pixels); CIFAR-100
    records are 3074 (coarse label, fine label, pixels) and the fine
    label is kept. Pre-converted SVHN-style files with the same layout
    read identically.
    """
    if variant not in ("cifar10", "cifar100"):
        raise ValueError(f"unknown variant {variant!r}")
    record = CIFAR10_RECORD if variant == "cifar10" else CIFAR100_RECORD
    classes = 10 if variant == "cifar10" else 100
    raw = np.fromfile(str(path), dtype=np.uint8)
    if raw.size == 0 or raw.size % record != 0:
        raise CifarFormatError(
            f"{path}: truncated file, {raw.size} bytes is not a positive multiple of "
            f"{record} (trailing fragment starts at byte offset {raw.size - raw.size % record})")
    rows = raw.reshape(-1, record)
    if variant == "cifar10":
        labels = rows[:, 0].astype(np.int64)
        pixels = rows[:, 1:]
    else:
        labels = rows[:, 1].astype(np.int64)  # fine label
        pixels = rows[:, 2:]
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        offset = int(bad[0]) * record
        raise CifarFormatError(
            f"{path}: label {labels[bad[0]]} out of range [0, {classes}) "
            f"at byte offset {offset}")
    x = _byte_to_float(pixels).reshape(-1, 3, 32, 32)
    return Dataset(x, labels, classes=classes, split=split,
                   provenance=f"{variant}:{path}")


def cifar10_int(current_batch: np.ndarray, previous_batch: np.ndarray, seed: int,
                noise_std: Optional[float] = None) -> np.ndarray:
    """Interpolated batch: midpoint of two batches plus small Gaussian
    noise (variance 0.001 by default), clipped back to [-1, 1]."""
    cur = np.asarray(current_batch, dtype=np.float64)
    prev = np.asarray(previous_batch, dtype=np.float64)
    if cur.shape != prev.shape:
        raise ValueError(f"cifar10_int: batch shapes differ, {cur.shape} vs {prev.shape}")
    std = INT_NOISE_STD if noise_std is None else float(noise_std)
    mid = (cur + prev) / 2.0
    if std > 0:
        mid = mid + np.random.default_rng(seed).normal(0.0, std, size=mid.shape)
    return np.clip(mid, -1.0, 1.0)


class BatchIterator:
    """Seeded epoch batching with access to the previous batch.

    The shuffle for epoch ``e`` is a pure function of (seed, e): the
    same seed reproduces the same order, and every epoch visits each
    example exactly once (the final batch may be short). The previous
    batch handle feeds the interpolation transform; the first batch of
    an epoch pairs with itself.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.previous: Optional[np.ndarray] = None

    def epoch(self, epoch_index: int = 0) -> Iterator[tuple]:
        order = np.random.default_rng([self.seed, epoch_index]).permutation(len(self.dataset))
        self.previous = None
        for start in range(0, len(self.dataset), self.batch_size):
            pick = order[start:start + self.batch_size]
            x = self.dataset.x[pick]
            y = self.dataset.y[pick]
            if self.previous is None:
                self.previous = x
            yield x, y
            self.previous = x


def batches(dataset: Dataset, batch_size: int, seed: int,
            epoch: int = 0) -> Iterator[tuple]:
    """One seeded epoch of (x, y) batches."""
    yield from BatchIterator(dataset, batch_size, seed).epoch(epoch)


def with_label_noise(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Flip a fraction of labels to a different class, uniformly."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    y = dataset.y.copy()
    n_flip = int(round(fraction * len(dataset)))
    picks = rng.choice(len(dataset), size=n_flip, replace=False)
    for i in picks:
        shift = int(rng.integers(1, dataset.classes))
        y[i] = (y[i] + shift) % dataset.classes
    return Dataset(dataset.x, y, classes=dataset.classes, split=dataset.split,
                   provenance=dataset.provenance + f"+label_noise({fraction}, seed={seed})")


def dataset_to_csv(dataset: Dataset, path) -> None:
    """Flat serialization: one row per example, x columns then label."""
    flat = dataset.x.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
        for row, label in zip(flat, dataset.y):
            writer.writerow([f"{v:.17g}" for v in row] + [int(label)])


def dataset_from_csv(path, classes: int, split: str = "train") -> Dataset:
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 1
        xs, ys = [], []
        for row in reader:
            xs.append([float(v) for v in row[:dim]])
            ys.append(int(row[dim]))
    return Dataset(np.asarray(xs), np.asarray(ys), classes=classes, split=split,
                   provenance=f"csv:{path}")
