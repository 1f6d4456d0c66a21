import os
import struct
from pathlib import Path

import numpy as np
import pytest


def write_idx(path: Path, arr: np.ndarray, magic: int) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    path.write_bytes(struct.pack(">i", magic) + struct.pack(f">{arr.ndim}i", *arr.shape) + arr.tobytes())


def make_fake_mnist(root: Path, n_train: int = 64, n_test: int = 32, seed: int = 0) -> Path:
    """Tiny IDX set whose class is written into the image as a bright column."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = np.arange(n) % 10
        rng.shuffle(labels)
        images = rng.integers(0, 40, size=(n, 28, 28))
        for i, y in enumerate(labels):
            images[i, 4:24, 2 + 2 * y:4 + 2 * y] = 255
        write_idx(root / f"{prefix}-images-idx3-ubyte", images, 2051)
        write_idx(root / f"{prefix}-labels-idx1-ubyte", labels, 2049)
    return root


@pytest.fixture
def fake_mnist(tmp_path):
    return make_fake_mnist(tmp_path / "mnist")


def mnist_dir() -> Path | None:
    for cand in (os.environ.get("FITPATH_DATA_DIR"), "/root/data/mnist"):
        if cand and (Path(cand) / "train-images-idx3-ubyte").exists():
            return Path(cand)
    return None


# one line per acceptance criterion, printed after the test session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
