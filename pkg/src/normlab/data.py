"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, synthetic clusters.

Images are returned as float64 (N, H, W, C) arrays; labels as int64.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
CIFAR_RECORD = 3073
CIFAR_SIDE = 32

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_DIR = "cifar-10-batches-bin"
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]


@dataclass
class DatasetHandle:
    id: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    def __post_init__(self):
        for name, y in (("train", self.y_train), ("test", self.y_test)):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise DataError(
                    f"{self.id} {name} labels must lie in [0, {self.num_classes}); "
                    f"found range [{y.min()}, {y.max()}]"
                )
        if self.x_train.shape[1:] != self.x_test.shape[1:]:
            raise DataError(f"train/test image shapes differ: {self.x_train.shape} vs {self.x_test.shape}")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def standardized(self) -> "DatasetHandle":
        """Per-channel standardization using train-split statistics only."""
        axes = tuple(range(self.x_train.ndim - 1))
        mean = self.x_train.mean(axis=axes)
        std = self.x_train.std(axis=axes)
        std = np.where(std > 0, std, 1.0)
        return DatasetHandle(
            self.id,
            (self.x_train - mean) / std,
            self.y_train,
            (self.x_test - mean) / std,
            self.y_test,
            self.num_classes,
        )

    def subset(self, n_train: int | None = None, n_test: int | None = None) -> "DatasetHandle":
        return DatasetHandle(
            self.id,
            self.x_train[:n_train],
            self.y_train[:n_train],
            self.x_test[:n_test],
            self.y_test[:n_test],
            self.num_classes,
        )


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX blob (labels rank 1, images rank 3)."""
    if len(buf) < 4:
        raise FormatError(f"IDX header truncated at byte offset {len(buf)} (need 4 magic bytes)")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (IDX_LABELS_MAGIC, IDX_IMAGES_MAGIC):
        raise FormatError(f"bad IDX magic 0x{magic:08X} at byte offset 0")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(buf) < header:
        raise FormatError(f"IDX dimension header truncated at byte offset {len(buf)} (need {header})")
    dims = struct.unpack(f">{rank}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) < header + count:
        raise FormatError(f"IDX payload truncated at byte offset {len(buf)} (need {header + count})")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped).

    Image files come back as (N, rows, cols, 1) float64 scaled into [0, 1];
    label files as int64 vectors.
    """
    with _open(path) as f:
        raw = parse_idx(f.read())
    if raw.ndim == 3:
        return raw.reshape(raw.shape + (1,)).astype(np.float64) / 255.0
    return raw.astype(np.int64)


def parse_cifar10(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) % CIFAR_RECORD:
        n_full = len(buf) // CIFAR_RECORD
        raise FormatError(f"CIFAR-10 record {n_full} truncated: file length {len(buf)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels


def load_cifar10_binary(paths) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate CIFAR-10 binary batches into (N, 32, 32, 3) images in [0, 1] and labels."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    xs, ys = [], []
    for p in paths:
        with _open(p) as f:
            try:
                x, y = parse_cifar10(f.read())
            except FormatError as exc:
                raise FormatError(f"{p}: {exc}") from None
        xs.append(x)
        ys.append(y)
    if not xs:
        return np.zeros((0, CIFAR_SIDE, CIFAR_SIDE, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys)


def data_dir(path=None) -> Path:
    env = os.environ.get("NORMLAB_DATA_DIR")
    if env:
        return Path(env)
    return Path(path) if path else Path("data")


def _find(root: Path, name: str) -> Path | None:
    for candidate in (root / name, root / (name + ".gz"), root / "mnist" / name, root / "mnist" / (name + ".gz")):
        if candidate.exists():
            return candidate
    return None


def mnist_available(root=None) -> bool:
    root = data_dir(root)
    return all(_find(root, f) for f in MNIST_FILES.values())


def load_mnist(root=None) -> DatasetHandle:
    root = data_dir(root)
    found = {k: _find(root, f) for k, f in MNIST_FILES.items()}
    missing = [MNIST_FILES[k] for k, v in found.items() if v is None]
    if missing:
        raise FileNotFoundError(f"MNIST files missing under {root}: {', '.join(missing)}")
    return DatasetHandle(
        "mnist",
        load_idx(found["train_images"]),
        load_idx(found["train_labels"]),
        load_idx(found["test_images"]),
        load_idx(found["test_labels"]),
        10,
    )


def cifar10_available(root=None) -> bool:
    base = data_dir(root) / CIFAR_DIR
    return all((base / f).exists() for f in CIFAR_TRAIN + CIFAR_TEST)


def load_cifar10(root=None) -> DatasetHandle:
    base = data_dir(root) / CIFAR_DIR
    missing = [f for f in CIFAR_TRAIN + CIFAR_TEST if not (base / f).exists()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files missing under {base}: {', '.join(missing)}")
    x_tr, y_tr = load_cifar10_binary([base / f for f in CIFAR_TRAIN])
    x_te, y_te = load_cifar10_binary([base / f for f in CIFAR_TEST])
    return DatasetHandle("cifar10", x_tr, y_tr, x_te, y_te, 10)


def load_digits() -> DatasetHandle:
    """scikit-learn's bundled 8x8 handwritten digits (1797 images).

    The file is ordered by writer, so rows are shuffled with a fixed
    permutation before the 80/20 split.
    """
    from sklearn.datasets import load_digits as _sk_digits

    d = _sk_digits()
    order = np.random.default_rng(0).permutation(len(d.target))
    x = d.images[order].reshape(-1, 8, 8, 1).astype(np.float64) / 16.0
    y = d.target[order].astype(np.int64)
    cut = int(0.8 * len(x))
    return DatasetHandle("digits", x[:cut], y[:cut], x[cut:], y[cut:], 10)


def synthetic_dataset(n: int, input_shape, num_classes: int, rng: np.random.Generator) -> DatasetHandle:
    """Gaussian clusters: each class centre sits 4 noise-stds from the origin.

    Centres point along orthonormal directions when the input has at least
    as many features as classes (pairwise separation 4*sqrt(2)); otherwise
    along random unit directions.  Samples are centre + N(0, 1) noise.  The
    first 80% of the shuffled samples form the train split.
    """
    if num_classes < 2:
        raise ParameterError(f"synthetic dataset needs >= 2 classes, got {num_classes}")
    if n < num_classes:
        raise ParameterError(f"need n >= num_classes, got n={n}, K={num_classes}")
    input_shape = tuple(int(s) for s in input_shape)
    dim = int(np.prod(input_shape))
    if dim >= num_classes:
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((num_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centres = 4.0 * dirs
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    x = (centres[labels] + rng.standard_normal((n, dim))).reshape((n,) + input_shape)
    cut = int(0.8 * n)
    return DatasetHandle("synthetic", x[:cut], labels[:cut].astype(np.int64), x[cut:], labels[cut:].astype(np.int64), num_classes)


def load_dataset(source: dict, seed: int = 0) -> DatasetHandle:
    """Build a standardized dataset from a config ``dataset`` section."""
    kind = source.get("id", "synthetic")
    if kind == "synthetic":
        ds = synthetic_dataset(
            source.get("n", 1000), source.get("input_shape", (8, 8, 1)), source.get("num_classes", 10), np.random.default_rng(seed)
        )
    elif kind == "mnist":
        ds = load_mnist(source.get("path"))
    elif kind == "cifar10":
        ds = load_cifar10(source.get("path"))
    elif kind == "digits":
        ds = load_digits()
    else:
        raise ParameterError(f"unknown dataset id {kind!r}")
    if source.get("n_train") or source.get("n_test"):
        ds = ds.subset(source.get("n_train"), source.get("n_test"))
    return ds.standardized()
