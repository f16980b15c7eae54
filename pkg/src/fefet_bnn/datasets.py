"""Dataset loading: IDX (MNIST) files and small synthetic sets."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.model_selection import train_test_split

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

DATA_ENV = "FEFET_BNN_DATA"
_REPO_DATA = Path(__file__).resolve().parents[2] / "data"


class DatasetError(ValueError):
    pass


@dataclass
class DatasetHandle:
    name: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    def __post_init__(self):
        for y in (self.y_train, self.y_test):
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise DatasetError("labels must lie in [0, n_classes)")
        if self.X_train.shape[1] != self.X_test.shape[1]:
            raise DatasetError("train and test feature counts differ")

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]

    def summary(self) -> str:
        return (f"{self.name}: {len(self.y_train)} train / {len(self.y_test)} test, "
                f"{self.n_features} features, {self.n_classes} classes")


def _open(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    """Read an unsigned-byte IDX file (plain or gzipped) into a uint8 array."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated header at offset 0")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise DatasetError(f"{path}: bad magic number {magic} at offset 0 (expected {expected_magic})")
    if magic >> 8 != 0x08:
        raise DatasetError(f"{path}: unsupported IDX data type 0x{(magic >> 8) & 0xFF:02x} at offset 2")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DatasetError(f"{path}: truncated data at offset {len(raw)}, expected {header + size} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    return X, labels.astype(np.int64)


def _find(directory: Path, stem: str) -> Optional[Path]:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    return None


def stratified_subset(X, y, n: int, seed=0):
    """Draw ``n`` samples with (as near as possible) equal counts per class."""
    classes = np.unique(y)
    if n > len(y):
        raise DatasetError(f"subset of {n} requested from {len(y)} samples")
    rng = np.random.default_rng(seed)
    per = np.full(len(classes), n // len(classes))
    per[: n % len(classes)] += 1
    idx = []
    for c, k in zip(classes, per):
        members = np.flatnonzero(y == c)
        if k > len(members):
            raise DatasetError(f"class {c} has only {len(members)} samples, {k} requested")
        idx.append(rng.choice(members, size=k, replace=False))
    idx = np.sort(np.concatenate(idx))
    return X[idx], y[idx]


def load_mnist(directory, test_size: int = 2000, seed: int = 0) -> DatasetHandle:
    """Load MNIST from a directory of IDX files.

    Standard ``train-*``/``t10k-*`` files give the usual 60000/10000 split.
    A single ``images-idx3-ubyte``/``labels-idx1-ubyte`` pair (the bundled
    10k subset) is split stratified into ``len - test_size`` / ``test_size``.
    """
    d = Path(directory)
    tr_i, tr_l = _find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte")
    te_i, te_l = _find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte")
    if tr_i and tr_l and te_i and te_l:
        Xtr, ytr = load_idx_pair(tr_i, tr_l)
        Xte, yte = load_idx_pair(te_i, te_l)
        return DatasetHandle("mnist", Xtr, ytr, Xte, yte, 10)
    im, lb = _find(d, "images-idx3-ubyte"), _find(d, "labels-idx1-ubyte")
    if not (im and lb):
        raise DatasetError(f"no IDX image/label files found in {d}")
    X, y = load_idx_pair(im, lb)
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=test_size, stratify=y, random_state=seed)
    return DatasetHandle(d.name, Xtr, ytr, Xte, yte, 10)


def make_blobs_dataset(n: int = 400, seed: int = 0, n_features: int = 2) -> DatasetHandle:
    """Linearly separable two-class toy set with features in [0, 1]."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centers = np.where(y[:, None] == 1, 0.75, 0.25)
    X = np.clip(centers + 0.06 * rng.standard_normal((n, n_features)), 0, 1)
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=0.25, stratify=y, random_state=seed)
    return DatasetHandle("blobs", Xtr.astype(np.float32), ytr, Xte.astype(np.float32), yte, 2)


def make_digits_dataset(seed: int = 0) -> DatasetHandle:
    """scikit-learn's 8x8 digits, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    X, y = load_digits(return_X_y=True)
    X = (X / 16.0).astype(np.float32)
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=0.25, stratify=y, random_state=seed)
    return DatasetHandle("digits", Xtr, ytr, Xte, yte, 10)


def default_mnist_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, _REPO_DATA)) / "mnist10k"


def load_dataset(name: str, subset: Optional[int] = None, seed: int = 0, test_size: int = 2000) -> DatasetHandle:
    """Resolve ``name`` (``mnist10k``, ``blobs``, ``digits`` or a directory path)."""
    if name == "blobs":
        ds = make_blobs_dataset(seed=seed)
    elif name == "digits":
        ds = make_digits_dataset(seed=seed)
    elif name == "mnist10k":
        ds = load_mnist(default_mnist_dir(), test_size=test_size, seed=seed)
    elif Path(name).is_dir():
        ds = load_mnist(name, test_size=test_size, seed=seed)
    else:
        raise DatasetError(f"unknown dataset {name!r}")
    if subset is not None:
        ds.X_train, ds.y_train = stratified_subset(ds.X_train, ds.y_train, subset, seed)
    return ds
