"""Image classification datasets: CIFAR-10 binary batches, MNIST IDX, synthetic blobs.

Loaders return pixels scaled to [0, 1].  :meth:`LabeledImageSet.normalized`
applies per-channel standardization with statistics taken from the training
split; the statistics travel with the set (and into checkpoints).
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "CorruptDataError",
    "DATA_DIR_ENV",
    "DataFormatError",
    "LabeledImageSet",
    "channel_stats",
    "default_data_dir",
    "load_cifar10",
    "load_dataset",
    "load_mnist",
    "synthetic_blobs",
]

DATA_DIR_ENV = "TERNVIT_DATA_DIR"

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """File is not in the expected format (e.g. wrong magic number)."""


class CorruptDataError(ValueError):
    """File has the right format but inconsistent or truncated contents."""


@dataclass(frozen=True)
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    class_count: int
    name: str
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def subset(self, limit: int | None) -> "LabeledImageSet":
        if limit is None or limit >= len(self):
            return self
        return replace(self, images=self.images[:limit], labels=self.labels[:limit])

    def normalized(self, mean=None, std=None) -> "LabeledImageSet":
        """Standardize each channel; statistics default to this set's own."""
        if self.mean is not None:
            raise ValueError(f"{self.name} is already normalized")
        if mean is None or std is None:
            mean, std = channel_stats(self)
        m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
        s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
        images = ((self.images.astype(np.float64) - m) / s).astype(np.float32)
        return replace(self, images=images, mean=tuple(map(float, mean)), std=tuple(map(float, std)))


def channel_stats(ds: LabeledImageSet) -> tuple[tuple[float, ...], tuple[float, ...]]:
    x = ds.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return tuple(map(float, mean)), tuple(map(float, std))


def default_data_dir() -> Path | None:
    value = os.environ.get(DATA_DIR_ENV)
    return Path(value) if value else None


def _read(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(f"missing data file: {path}")


def _check_split(split: str, table: dict) -> None:
    if split not in table:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(table)}")


def load_cifar10(directory, split: str = "train", limit: int | None = None) -> LabeledImageSet:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-planar pixel bytes per record)."""
    _check_split(split, CIFAR_FILES)
    directory = Path(directory)
    if not (directory / CIFAR_FILES[split][0]).exists() and (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    chunks = []
    have = 0
    for fname in CIFAR_FILES[split]:
        raw = _read(directory / fname)
        if len(raw) % CIFAR_RECORD:
            raise CorruptDataError(f"{fname}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        chunks.append(recs)
        have += len(recs)
        if limit is not None and have >= limit:
            break
    recs = np.concatenate(chunks)[:limit]
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise CorruptDataError(f"label byte {labels.max()} out of range for CIFAR-10")
    images = (recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return LabeledImageSet(images, labels, 10, f"cifar10-{split}")


def _idx_header(raw: bytes, magic: int, ndim: int, fname: str) -> tuple[int, ...]:
    if len(raw) < 4 + 4 * ndim:
        raise CorruptDataError(f"{fname}: truncated IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{fname}: bad magic {got:#010x}, expected {magic:#010x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    need = 4 + 4 * ndim + int(np.prod(dims))
    if len(raw) != need:
        raise CorruptDataError(f"{fname}: expected {need} bytes from header, found {len(raw)}")
    return dims


def load_mnist(directory, split: str = "train", limit: int | None = None) -> LabeledImageSet:
    """Read MNIST IDX files (raw or ``.gz``) into 1 x 28 x 28 images."""
    _check_split(split, MNIST_FILES)
    directory = Path(directory)
    img_name, lbl_name = MNIST_FILES[split]
    img_raw = _read(directory / img_name)
    lbl_raw = _read(directory / lbl_name)
    n_img, rows, cols = _idx_header(img_raw, MNIST_IMAGE_MAGIC, 3, img_name)
    (n_lbl,) = _idx_header(lbl_raw, MNIST_LABEL_MAGIC, 1, lbl_name)
    if n_img != n_lbl:
        raise CorruptDataError(f"{img_name} has {n_img} images but {lbl_name} has {n_lbl} labels")
    n = n_img if limit is None else min(limit, n_img)
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16, count=n * rows * cols)
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8, count=n).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise CorruptDataError(f"{lbl_name}: label {labels.max()} out of range")
    images = pixels.reshape(n, 1, rows, cols).astype(np.float32) / 255.0
    return LabeledImageSet(images, labels, 10, f"mnist-{split}")


_BLOB_MEAN_SEED = 0xB10B


def blob_means(classes: int, image_size: int, channels: int, sigma: float = 0.1) -> np.ndarray:
    """Fixed class-mean images: 0.5 +- 2 sigma per pixel with a per-class sign pattern."""
    rng = np.random.default_rng(_BLOB_MEAN_SEED)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(classes, channels * image_size * image_size))
    means = 0.5 + 2 * sigma * signs
    diffs = np.sqrt(((means[:, None] - means[None]) ** 2).sum(-1))
    min_dist = diffs[~np.eye(classes, dtype=bool)].min() if classes > 1 else np.inf
    if min_dist < 6 * sigma:
        raise ValueError(f"image too small to separate {classes} classes (min mean distance {min_dist:.3f})")
    return means.reshape(classes, channels, image_size, image_size)


def synthetic_blobs(
    classes: int = 10,
    per_class: int = 100,
    image_size: int = 32,
    seed: int = 0,
    channels: int = 3,
    sigma: float = 0.1,
) -> LabeledImageSet:
    """Isotropic Gaussian blobs around fixed per-class mean images, clipped to [0, 1].

    Samples are interleaved by class (0, 1, ..., K-1, 0, 1, ...).
    """
    if classes < 2:
        raise ValueError("synthetic_blobs needs at least 2 classes")
    means = blob_means(classes, image_size, channels, sigma)
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(classes, dtype=np.int64), per_class)
    noise = rng.normal(0.0, sigma, size=(len(labels), channels, image_size, image_size))
    images = np.clip(means[labels] + noise, 0.0, 1.0).astype(np.float32)
    return LabeledImageSet(images, labels, classes, f"synthetic-{classes}x{per_class}")


def load_dataset(
    name: str,
    split: str,
    data_dir=None,
    limit: int | None = None,
    seed: int = 0,
    image_size: int = 32,
    classes: int = 10,
) -> LabeledImageSet:
    """Dispatch on dataset name; ``synthetic`` draws train and test from disjoint seeds."""
    if name == "synthetic":
        per_class = 100 if limit is None else -(-limit // classes)
        split_seed = seed * 2 + (0 if split == "train" else 1)
        return synthetic_blobs(classes, per_class, image_size, split_seed).subset(limit)
    data_dir = data_dir or default_data_dir()
    if data_dir is None:
        raise FileNotFoundError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    if name == "mnist":
        return load_mnist(data_dir, split, limit)
    if name == "cifar10":
        return load_cifar10(data_dir, split, limit)
    raise ValueError(f"unknown dataset {name!r}")
