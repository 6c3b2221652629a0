"""Dataset ingestion (CIFAR-10 binary, MNIST IDX), augmentation and batching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor, get_default_dtype
from .rng import AUGMENT, SHUFFLE, stream

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    """Malformed or missing dataset files."""


@dataclass
class Dataset:
    images: np.ndarray  # uint8, N x C x H x W
    labels: np.ndarray  # int64, N
    num_classes: int = 10
    channel_mean: Optional[np.ndarray] = None
    channel_std: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise DatasetError(f"need N > 0 images with one label each, got {len(self.images)} / {len(self.labels)}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if self.channel_mean is None or self.channel_std is None:
            self.channel_mean, self.channel_std = channel_stats(self.images)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "Dataset":
        """Rows ``indices``; channel statistics are inherited, not recomputed."""
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       self.channel_mean, self.channel_std, self.name)

    def with_stats(self, mean, std) -> "Dataset":
        return Dataset(self.images, self.labels, self.num_classes, np.asarray(mean, dtype=np.float64),
                       np.asarray(std, dtype=np.float64), self.name)


@dataclass(frozen=True)
class AugmentPolicy:
    pad: int = 4
    crop: int = 32
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.pad < 0 or self.crop < 1 or not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"invalid augmentation policy {self}")


IDENTITY_POLICY = AugmentPolicy(pad=0, crop=32, hflip_prob=0.0)


def channel_stats(images: np.ndarray) -> tuple:
    """Per-channel mean and std of pixel values scaled to [0, 1]."""
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return mean, std


def _read_cifar_file(path: Path) -> tuple:
    size = path.stat().st_size
    if size == 0 or size % CIFAR_RECORD:
        raise DatasetError(
            f"{path}: size {size} bytes is not a whole number of {CIFAR_RECORD}-byte records "
            f"(a standard 10k-record file is {10000 * CIFAR_RECORD:,} bytes)"
        )
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return raw[:, 1:].reshape(-1, 3, 32, 32), raw[:, 0].astype(np.int64)


def _cifar_root(directory) -> Path:
    root = Path(directory)
    nested = root / "cifar-10-batches-bin"
    if not (root / CIFAR_TEST_FILE).exists() and (nested / CIFAR_TEST_FILE).exists():
        return nested
    return root


def load_cifar10(directory) -> tuple:
    """Read the CIFAR-10 binary distribution.

    Each record is one label byte followed by 3072 pixel bytes: the 1024 red
    values, then green, then blue, each plane row-major.
    """
    root = _cifar_root(directory)
    missing = [f for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (root / f).exists()]
    if missing:
        raise DatasetError(f"CIFAR-10 directory {root} is missing {', '.join(missing)}")
    parts = [_read_cifar_file(root / f) for f in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = _read_cifar_file(root / CIFAR_TEST_FILE)
    for y in (train_y, test_y):
        if y.max() >= 10:
            raise DatasetError(f"CIFAR-10 label byte out of range: {y.max()}")
    train = Dataset(train_x, train_y, 10, name="cifar10-train")
    test = Dataset(test_x, test_y, 10, train.channel_mean, train.channel_std, name="cifar10-test")
    return train, test


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: too short for an IDX header")
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise DatasetError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    payload = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    if payload.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: payload has {payload.size} bytes, header promises {int(np.prod(dims))}")
    return payload.reshape(dims)


def upscale_nearest(images: np.ndarray, size: int) -> np.ndarray:
    h, w = images.shape[-2:]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return images[..., rows[:, None], cols[None, :]]


def load_mnist_idx(images_path, labels_path, upscale: Optional[int] = 32, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (MNIST, Fashion-MNIST) as an N x 1 x H x W dataset."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    if upscale:
        images = upscale_nearest(images, upscale)
    return Dataset(images[:, None].copy(), labels, num_classes, name=Path(images_path).stem)


def load_mnist_dir(directory, upscale: Optional[int] = 32) -> tuple:
    root = Path(directory)
    def pick(*names):
        for n in names:
            if (root / n).exists():
                return root / n
        raise DatasetError(f"{root} has none of {names}")
    train = load_mnist_idx(pick("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
                           pick("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"), upscale)
    test = load_mnist_idx(pick("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
                          pick("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"), upscale)
    return train, test.with_stats(train.channel_mean, train.channel_std)


def augment(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, take a random ``crop x crop`` window and flip horizontally, independently per sample."""
    n, c, h, w = images.shape
    hp, wp = h + 2 * policy.pad, w + 2 * policy.pad
    if policy.crop > min(hp, wp):
        raise ValueError(f"crop {policy.crop} larger than padded size {hp}x{wp}")
    padded = images
    if policy.pad:
        padded = np.pad(images, ((0, 0), (0, 0), (policy.pad, policy.pad), (policy.pad, policy.pad)))
    oy = rng.integers(0, hp - policy.crop + 1, size=n)
    ox = rng.integers(0, wp - policy.crop + 1, size=n)
    flip = rng.random(n) < policy.hflip_prob
    out = np.empty((n, c, policy.crop, policy.crop), dtype=images.dtype)
    for i in range(n):
        patch = padded[i, :, oy[i]:oy[i] + policy.crop, ox[i]:ox[i] + policy.crop]
        out[i] = patch[:, :, ::-1] if flip[i] else patch
    return out


def normalize(images: np.ndarray, mean, std, dtype=None) -> np.ndarray:
    dtype = dtype or get_default_dtype()
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return ((images.astype(np.float64) / 255.0 - mean) / std).astype(dtype)


def denormalize(x: np.ndarray, mean, std) -> np.ndarray:
    """Map normalized inputs back to [0, 1] pixel space, in float64."""
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return np.asarray(x, dtype=np.float64) * std + mean


def epoch_order(n: int, seed: Optional[int], epoch: int = 0) -> np.ndarray:
    if seed is None:
        return np.arange(n)
    return stream(SHUFFLE, seed, epoch).permutation(n)


def batches(dataset: Dataset, batch_size: int, shuffle_seed: Optional[int] = None, epoch: int = 0,
            policy: Optional[AugmentPolicy] = None, start_batch: int = 0) -> Iterator[tuple]:
    """Yield ``(x, labels, indices)`` batches covering the dataset once.

    ``shuffle_seed=None`` keeps dataset order. Augmentation for batch ``b``
    draws from a stream keyed by ``(seed, epoch, b)``, so any batch can be
    regenerated in isolation.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(dataset), shuffle_seed, epoch)
    aug_seed = 0 if shuffle_seed is None else shuffle_seed
    for b, start in enumerate(range(0, len(order), batch_size)):
        if b < start_batch:
            continue
        idx = order[start:start + batch_size]
        images = dataset.images[idx]
        if policy is not None:
            images = augment(images, policy, stream(AUGMENT, aug_seed, epoch, b))
        x = Tensor(normalize(images, dataset.channel_mean, dataset.channel_std))
        yield x, dataset.labels[idx], idx


def write_cifar_file(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Serialize ``uint8`` N x 3 x 32 x 32 images in the CIFAR-10 binary record layout."""
    images = np.asarray(images, dtype=np.uint8)
    rec = np.empty((len(images), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images.reshape(len(images), -1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rec.tofile(path)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def synthetic_cifar(directory, n_train: int = 100, n_test: int = 50, seed: int = 0, num_classes: int = 10) -> Path:
    """Write a small, learnable CIFAR-format dataset (class-dependent colour blobs plus noise)."""
    rng = np.random.default_rng(seed)
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    templates = rng.uniform(40, 215, size=(num_classes, 3, 4, 4))
    templates = np.repeat(np.repeat(templates, 8, axis=2), 8, axis=3)
    def make(n):
        y = rng.integers(0, num_classes, size=n)
        x = templates[y] + rng.normal(0, 30, size=(n, 3, 32, 32))
        return np.clip(x, 0, 255).astype(np.uint8), y
    per_file = [n_train // 5 + (1 if i < n_train % 5 else 0) for i in range(5)]
    for name, count in zip(CIFAR_TRAIN_FILES, per_file):
        x, y = make(max(count, 1))
        write_cifar_file(root / name, x, y)
    x, y = make(n_test)
    write_cifar_file(root / CIFAR_TEST_FILE, x, y)
    return root


def default_cifar_dir() -> Optional[str]:
    return os.environ.get("LCFORGE_CIFAR10_DIR")
