"""MNIST IDX loading, synthetic blobs, batching and the calibration subset."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081
IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


def _open(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(f"missing IDX file {path} (or {gz.name})")


def read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    """Read an IDX file: big-endian magic, big-endian dims, then uint8 payload."""
    with _open(Path(path)) as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic number {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}i", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise DataError(f"{path}: truncated payload ({len(raw) - head} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def normalize(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float64) / 255.0 - MNIST_MEAN) / MNIST_STD


def resolve_data_dir(data_dir: str | os.PathLike | None) -> Path:
    if data_dir:
        return Path(data_dir)
    env = os.environ.get("FITPATH_DATA_DIR")
    if env:
        return Path(env)
    raise DataError("no data directory: pass --data-dir or set FITPATH_DATA_DIR")


def load_mnist(data_dir=None) -> tuple[Dataset, Dataset]:
    root = resolve_data_dir(data_dir)
    out = []
    for split, (img_name, lbl_name) in _FILES.items():
        images = read_idx(root / img_name, IMAGE_MAGIC)
        labels = read_idx(root / lbl_name, LABEL_MAGIC)
        if images.shape[0] != labels.shape[0]:
            raise DataError(f"{split}: {images.shape[0]} images vs {labels.shape[0]} labels")
        x = normalize(images)[:, None, :, :]
        out.append(Dataset(x, labels.astype(np.int64), split, 10))
    return out[0], out[1]


def synthetic_blobs(k: int, n: int, dim: int, seed: int, separation: float = 10.0,
                    sigma: float = 1.0, split: str = "train") -> Dataset:
    """Isotropic Gaussian clusters whose closest centers are ``separation * sigma`` apart.

    Labels are assigned round-robin before shuffling, so class counts differ by at most one.
    """
    if k < 2 or n < k or dim < 1:
        raise DataError(f"invalid blob sizes k={k}, n={n}, dim={dim}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(k, dim))
    if k > 1:
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        closest = d[np.triu_indices(k, 1)].min()
        if closest == 0:
            raise DataError("degenerate cluster centers")
        centers *= separation * sigma / closest
    labels = np.arange(n) % k
    rng.shuffle(labels)
    x = centers[labels] + rng.normal(scale=sigma, size=(n, dim))
    return Dataset(x, labels.astype(np.int64), split, k)


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (x, y) batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield ds.images[idx], ds.labels[idx]


def calibration_set(ds: Dataset, size: int = 1024, seed: int = 0) -> Dataset:
    """First ``size`` samples of a seeded shuffle of ``ds``."""
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(order[:size])
