"""Dataset loading (MNIST IDX), synthetic blobs and stratified subsetting."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# IDX type byte -> numpy dtype (big-endian on disk)
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.str.lstrip("<>|"): k for k, v in _IDX_DTYPES.items()}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    source: str = ""
    normalization: str = "none"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        if len(self.labels) != len(self.features):
            raise ValueError("features and labels differ in length")
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels outside 0..num_classes-1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.features[index], self.labels[index], self.num_classes,
                       self.source, self.normalization, dict(self.meta))


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an ndarray."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if code not in _IDX_DTYPES or ndim == 0:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_DTYPES[code]
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - header < nbytes:
        raise IdxFormatError(f"{path}: truncated body ({len(raw) - header} of {nbytes} bytes)")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=header).reshape(shape)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write ``array`` as IDX; gzip when the path ends in .gz unless told otherwise."""
    array = np.asarray(array)
    key = array.dtype.str.lstrip("<>|")
    if key not in _IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    code = _IDX_CODES[key]
    header = struct.pack(">I", (code << 8) | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    body = array.astype(_IDX_DTYPES[code], copy=False).tobytes()
    payload = header + body
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        # mtime pinned so output bytes are reproducible
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = max(10, int(labels.max()) + 1)
    return Dataset(features, labels, num_classes, source=f"idx:{images_path}",
                   normalization="divide-by-255")


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist_dir(directory, split: str = "train") -> Dataset:
    """Load the standard MNIST file pair for ``split`` from ``directory`` (plain or .gz)."""
    if split not in _MNIST_NAMES:
        raise ValueError(f"unknown split {split!r}")
    directory = Path(directory)
    paths = []
    for name in _MNIST_NAMES[split]:
        for candidate in (directory / name, directory / (name + ".gz")):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{name}[.gz] not found in {directory}")
    return load_idx(*paths)


def make_synthetic(n: int, d: int, classes: int, seed: int, *, separation: float = 4.0,
                   sigma: float = 1.0, part: int = 0) -> Dataset:
    """Gaussian class blobs, shifted to be nonnegative.

    Class means depend on ``seed`` only; ``part`` selects an independent draw of
    samples around the same means, so part=0/part=1 act as a train/test pair.
    Means are pairwise ``separation * sigma`` apart when ``d >= classes``.
    """
    if n < 1 or d < 1 or classes < 1:
        raise ValueError("n, d and classes must be >= 1")
    mean_rng = np.random.default_rng(seed)
    raw = mean_rng.standard_normal((d, classes))
    if d >= classes:
        basis, _ = np.linalg.qr(raw)
        means = basis.T * (separation * sigma / np.sqrt(2.0))
    else:
        means = (raw / np.linalg.norm(raw, axis=0)).T * (separation * sigma / np.sqrt(2.0))
    rng = np.random.default_rng([seed, part + 1])
    labels = rng.permutation(np.arange(n) % classes)
    x = means[labels] + sigma * rng.standard_normal((n, d))
    lo = means.min() - 4.0 * sigma
    x = np.clip(x - lo, 0.0, None)
    return Dataset(x, labels.astype(np.int64), classes,
                   source=f"synthetic:n={n},d={d},classes={classes},seed={seed},part={part}",
                   normalization="shift-clip")


def _allocate(counts: np.ndarray, n: int) -> np.ndarray:
    # largest-remainder allocation, capped at availability
    exact = counts * (n / counts.sum())
    alloc = np.minimum(np.floor(exact).astype(np.int64), counts)
    order = np.argsort(-(exact - np.floor(exact)), kind="stable")
    i = 0
    while alloc.sum() < n:
        k = order[i % len(order)]
        if alloc[k] < counts[k]:
            alloc[k] += 1
        i += 1
    return alloc


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Class-stratified random subset of size ``n``."""
    if n > ds.n:
        raise ValueError(f"requested {n} samples but dataset has {ds.n}")
    if n < 1:
        raise ValueError("subset size must be >= 1")
    rng = np.random.default_rng(seed)
    present = np.unique(ds.labels)
    counts = np.array([np.sum(ds.labels == c) for c in present])
    alloc = _allocate(counts, n)
    picks = []
    for c, k in zip(present, alloc):
        idx = np.flatnonzero(ds.labels == c)
        picks.append(rng.choice(idx, size=k, replace=False))
    index = rng.permutation(np.concatenate(picks))
    out = ds.take(index)
    out.meta["subset"] = {"n": n, "seed": seed}
    return out


def to_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{j}" for j in range(ds.dim)])
        for y, row in zip(ds.labels, ds.features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])
