"""Dataset loading: embedded IRIS table, MNIST IDX files, PCA compression."""

from __future__ import annotations

import gzip
import io
import os
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        for y in (self.y_train, self.y_test):
            if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError("label outside class range")
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise ValueError("feature/label count mismatch")

    def eval_subset(self, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Fixed n-sample subset of the test split (all of it when n >= size)."""
        if n >= len(self.y_test):
            return self.x_test, self.y_test
        idx = np.sort(np.random.default_rng(seed).choice(len(self.y_test), n, replace=False))
        return self.x_test[idx], self.y_test[idx]


# ------------------------------------------------------------------- IRIS

def _iris_table() -> tuple[np.ndarray, np.ndarray]:
    text = resources.files("bitglow.assets").joinpath("iris.csv").read_text()
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    n_rows, n_feat = int(header[0]), int(header[1])
    try:
        table = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",")
    except ValueError as exc:
        raise ValueError(f"corrupt IRIS asset: {exc}") from None
    if table.shape != (n_rows, n_feat + 1):
        raise ValueError(f"corrupt IRIS asset: shape {table.shape}")
    return table[:, :n_feat], table[:, n_feat].astype(np.int64)


def stratified_split(y: np.ndarray, n_test: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (train, test) with classes represented proportionally in test."""
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    per_class = [np.flatnonzero(y == c) for c in classes]
    quota = np.floor(n_test * np.array([len(p) for p in per_class]) / len(y)).astype(int)
    # hand leftover slots to the largest classes first, ties by class order
    for i in np.argsort([-len(p) for p in per_class], kind="stable")[: n_test - quota.sum()]:
        quota[i] += 1
    test = []
    for members, q in zip(per_class, quota):
        test.extend(rng.permutation(members)[:q])
    test = np.sort(np.array(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(y)), test)
    return train, test


def load_iris(seed: int = 0, n_test: int = 50) -> Dataset:
    """150-sample IRIS, stratified 100/50 split, min-max scaled from train stats."""
    x, y = _iris_table()
    tr, te = stratified_split(y, n_test, seed)
    lo, hi = x[tr].min(axis=0), x[tr].max(axis=0)
    scale = np.where(hi > lo, hi - lo, 1.0)
    xs = (x - lo) / scale
    return Dataset(xs[tr], y[tr], xs[te], y[te], n_classes=3, name="iris")


# ------------------------------------------------------------------- IDX / MNIST

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    """uint8 array [n, rows, cols] from an IDX3 image file."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: truncated header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: bad image magic 0x{magic:08x}")
    if len(raw) - 16 != n * rows * cols:
        raise IdxFormatError(f"{path}: payload does not match {n}x{rows}x{cols}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{path}: bad label magic 0x{magic:08x}")
    if len(raw) - 8 != n:
        raise IdxFormatError(f"{path}: payload does not match {n} labels")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_mnist(train_images, train_labels, test_images, test_labels) -> Dataset:
    """MNIST from four IDX files; pixels flattened and scaled to [0, 1]."""
    xtr, ytr = read_idx_images(train_images), read_idx_labels(train_labels)
    xte, yte = read_idx_images(test_images), read_idx_labels(test_labels)
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise IdxFormatError("image and label counts differ")
    if xtr.shape[1:] != xte.shape[1:]:
        raise IdxFormatError("train and test image sizes differ")
    flat = lambda a: a.reshape(len(a), -1).astype(np.float64) / 255.0
    return Dataset(flat(xtr), ytr, flat(xte), yte, n_classes=10, name="mnist")


def find_idx_files(directory) -> Optional[dict]:
    """Paths of the four standard MNIST files in ``directory`` (plain or .gz)."""
    found = {}
    for key, stem in MNIST_FILES.items():
        for name in (stem, stem + ".gz"):
            p = Path(directory) / name
            if p.exists():
                found[key] = p
                break
        else:
            return None
    return found


def write_mnist_subset(directory, n_test: int = 1000, seed: int = 0) -> dict:
    """Materialise the 5000-image MNIST sample shipped with mlxtend as IDX files.

    Used when the canonical 60k/10k files are not available. The sample is
    split into ``5000 - n_test`` train and ``n_test`` test images.
    """
    directory = Path(directory)
    existing = find_idx_files(directory)
    if existing:
        return existing
    try:
        src = resources.files("mlxtend.data").joinpath("data", "mnist_5k.csv.gz")
        with src.open("rb") as raw, gzip.open(raw, "rt") as f:
            table = np.loadtxt(f, delimiter=",", dtype=np.int64)
    except ModuleNotFoundError:
        raise FileNotFoundError(
            "no MNIST IDX files found and the mlxtend sample is not installed; "
            "set BITGLOW_MNIST_DIR or `pip install mlxtend`"
        ) from None
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1]
    tr, te = stratified_split(labels, n_test, seed)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {k: directory / v for k, v in MNIST_FILES.items()}
    tmp = {k: p.with_suffix(".tmp") for k, p in paths.items()}
    write_idx_images(tmp["train_images"], images[tr])
    write_idx_labels(tmp["train_labels"], labels[tr])
    write_idx_images(tmp["test_images"], images[te])
    write_idx_labels(tmp["test_labels"], labels[te])
    for k in paths:
        os.replace(tmp[k], paths[k])
    return paths


def default_cache_dir() -> Path:
    return Path(os.environ.get("BITGLOW_CACHE", Path.home() / ".cache" / "bitglow"))


def resolve_mnist(directory=None) -> tuple[dict, str]:
    """Locate MNIST IDX files; returns (paths, source) with source 'canonical' or 'subset'.

    Lookup order: ``directory``, $BITGLOW_MNIST_DIR, then the mlxtend sample
    written under the cache directory.
    """
    for d in (directory, os.environ.get("BITGLOW_MNIST_DIR")):
        if d and (found := find_idx_files(d)):
            return found, "canonical"
    return write_mnist_subset(default_cache_dir() / "mnist5k"), "subset"


# ------------------------------------------------------------------- PCA

@dataclass
class PcaTransform:
    mean: np.ndarray
    components: np.ndarray  # [k, d]
    fitted_on_train: bool = True

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def inverse(self, z) -> np.ndarray:
        return np.asarray(z) @ self.components + self.mean

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "fitted_on_train": self.fitted_on_train,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PcaTransform":
        return cls(np.array(doc["mean"]), np.array(doc["components"]), doc["fitted_on_train"])


def fit_pca(x_train, k: int = 50) -> PcaTransform:
    x = np.asarray(x_train, dtype=np.float64)
    if k > x.shape[1]:
        raise ValueError(f"k={k} exceeds feature dimension {x.shape[1]}")
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:k]
    # sign convention: largest-magnitude entry of each component is positive
    pivot = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(k), pivot])[:, None]
    return PcaTransform(mean, comps)


def apply_pca(t: PcaTransform, x) -> np.ndarray:
    return t.apply(x)


def pca_dataset(ds: Dataset, k: int = 50) -> tuple[Dataset, PcaTransform]:
    t = fit_pca(ds.x_train, k)
    return (
        Dataset(t.apply(ds.x_train), ds.y_train, t.apply(ds.x_test), ds.y_test,
                ds.n_classes, name=f"{ds.name}-pca{k}"),
        t,
    )
