"""CIFAR-10 binary ingestion, a synthetic Gaussian-class dataset, and seeded batching."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .rng import STREAM_DATA_ORDER, STREAM_SYNTHETIC, make_rng

__all__ = [
    "BatchPlan",
    "CifarFormatError",
    "Dataset",
    "batches",
    "load_cifar10",
    "read_cifar_batch",
    "standardise",
    "synthetic_gaussian_classes",
    "synthetic_splits",
    "write_cifar_batch",
    "write_cifar_dataset",
]

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


class CifarFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, 3, H, W), float
    labels: np.ndarray  # (n,), int64
    split: str = "train"
    channel_mean: Optional[np.ndarray] = None
    channel_std: Optional[np.ndarray] = None
    classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, n: int) -> "Dataset":
        """The first `n` records, keeping the standardisation statistics."""
        return replace(self, images=self.images[:n], labels=self.labels[:n])

    def to_pixels(self) -> np.ndarray:
        """Undo standardisation and quantise back to uint8 pixels."""
        x = self.images.astype(np.float64)
        if self.channel_mean is not None:
            x = x * self.channel_std[None, :, None, None] + self.channel_mean[None, :, None, None]
        return quantise(x)


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 pixels (n, 3, 32, 32) and labels from one binary batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise CifarFormatError(f"{path}: length {raw.size} is not a multiple of {RECORD_BYTES}")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise CifarFormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    return records[:, 1:].reshape(-1, *IMAGE_SHAPE), labels


def write_cifar_batch(path, pixels: np.ndarray, labels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    if pixels.shape[1] != RECORD_BYTES - 1:
        raise ValueError(f"expected {RECORD_BYTES - 1} pixel bytes per record, got {pixels.shape[1]}")
    out = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = np.asarray(labels, dtype=np.uint8)
    out[:, 1:] = pixels
    out.tofile(path)


def write_cifar_dataset(path, dataset: Dataset) -> None:
    write_cifar_batch(path, dataset.to_pixels(), dataset.labels)


def quantise(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats back to the uint8 pixels they came from."""
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def standardise(train: np.ndarray, *others: np.ndarray, scale: float = 1.0, dtype=np.float32):
    """Per-channel standardisation of `x * scale` using statistics of the train split only.

    Goes one channel at a time, so uint8 CIFAR pixels never need a full float64 copy.
    """
    mean = train.mean(axis=(0, 2, 3), dtype=np.float64) * scale
    sq = np.zeros(train.shape[1])
    for c in range(train.shape[1]):
        centred = train[:, c].astype(np.float64) * scale - mean[c]
        sq[c] = np.mean(centred * centred)
    std = np.sqrt(sq)
    std = np.where(std > 0, std, 1.0)

    def apply(x):
        out = np.empty(x.shape, dtype=dtype)
        for c in range(x.shape[1]):
            out[:, c] = (x[:, c].astype(np.float64) * scale - mean[c]) / std[c]
        return out

    return mean, std, [apply(train)] + [apply(o) for o in others]


def _find_dir(path: Path) -> Path:
    for cand in (path, path / "cifar-10-batches-bin"):
        if (cand / TEST_FILE).exists():
            return cand
    raise FileNotFoundError(f"no CIFAR-10 binary batches ({TEST_FILE}) under {path}")


def load_cifar10(path, dtype=np.float32) -> tuple[Dataset, Dataset]:
    """Train (50,000) and test (10,000) splits, scaled to [0, 1] then standardised on train."""
    root = _find_dir(Path(path))
    parts = [read_cifar_batch(root / f) for f in TRAIN_FILES if (root / f).exists()]
    if not parts:
        raise FileNotFoundError(f"no training batches under {root}")
    train_px = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_px, test_y = read_cifar_batch(root / TEST_FILE)
    mean, std, (xtr, xte) = standardise(train_px, test_px, scale=1.0 / 255.0, dtype=dtype)
    return (
        Dataset(xtr, train_y, "train", mean, std),
        Dataset(xte, test_y, "test", mean, std),
    )


def _class_means(classes: int, shape, separation: float, seed: int) -> np.ndarray:
    rng = make_rng(seed, STREAM_SYNTHETIC, 0)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(classes, *shape))
    return 0.5 * separation * signs


def synthetic_gaussian_classes(
    classes: int,
    n_per_class: int,
    seed: int,
    *,
    split: str = "train",
    shape=IMAGE_SHAPE,
    separation: float = 3.0,
    noise: float = 1.0,
) -> Dataset:
    """Class-conditional Gaussian images, unstandardised.

    Each class mean is a fixed +-separation/2 pattern per pixel (drawn from `seed`), so
    two class means differ by `separation` noise standard deviations wherever their
    signs disagree. Noise for each split comes from its own stream.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    means = _class_means(classes, tuple(shape), separation, seed)
    split_key = {"train": 1, "test": 2}.get(split, 3)
    rng = make_rng(seed, STREAM_SYNTHETIC, split_key)
    labels = np.repeat(np.arange(classes, dtype=np.int64), n_per_class)
    labels = labels[rng.permutation(labels.size)]
    images = means[labels] + noise * rng.standard_normal((labels.size, *shape))
    return Dataset(images.astype(np.float32), labels, split, classes=classes)


def synthetic_splits(
    classes: int = 10,
    n_train_per_class: int = 50,
    n_test_per_class: int = 20,
    seed: int = 0,
    *,
    shape=IMAGE_SHAPE,
    separation: float = 3.0,
    noise: float = 1.0,
    dtype=np.float32,
) -> tuple[Dataset, Dataset]:
    """Train/test synthetic splits sharing class means, standardised on the train split."""
    kw = dict(shape=shape, separation=separation, noise=noise)
    tr = synthetic_gaussian_classes(classes, n_train_per_class, seed, split="train", **kw)
    te = synthetic_gaussian_classes(classes, n_test_per_class, seed, split="test", **kw)
    mean, std, (xtr, xte) = standardise(tr.images, te.images, dtype=dtype)
    return (
        Dataset(xtr, tr.labels, "train", mean, std, classes),
        Dataset(xte, te.labels, "test", mean, std, classes),
    )


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def permutation(self, n: int, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(n)
        return make_rng(self.seed, STREAM_DATA_ORDER, epoch).permutation(n)

    def num_batches(self, n: int) -> int:
        return math.ceil(n / self.batch_size)


def batches(dataset: Dataset, plan: BatchPlan, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Mini-batches in the (seed, epoch) order; the last one may be short."""
    order = plan.permutation(len(dataset), epoch)
    for start in range(0, len(order), plan.batch_size):
        idx = order[start : start + plan.batch_size]
        yield dataset.images[idx], dataset.labels[idx]
