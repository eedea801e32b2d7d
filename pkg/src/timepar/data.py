"""Datasets and deterministic mini-batch streams.

Synthetic sets are 2-D, two-class problems that a linear classifier cannot
solve: concentric ellipses and an intertwined swiss roll.  MNIST is read from
the standard IDX files.
"""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, IDXFormatError

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


@dataclass(frozen=True)
class Dataset:
    """Normalized inputs with integer labels.

    ``inputs = (raw - shift) / scale`` per feature; the record is kept so that
    held-out data can be normalized identically.
    """

    inputs: np.ndarray
    labels: np.ndarray
    name: str
    shift: np.ndarray
    scale: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ContractError("dataset needs at least one sample")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ContractError("need exactly one label per sample")
        if not np.isfinite(self.inputs).all():
            raise ContractError("dataset inputs must be finite")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ContractError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.shift) / self.scale

    def raw_inputs(self) -> np.ndarray:
        return self.inputs * self.scale + self.shift

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.name,
                       self.shift, self.scale, self.n_classes)

    def to_csv(self, path) -> None:
        """Write ``x0,x1,...,label`` rows (normalized features)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.input_dim)] + ["label"])
            for x, y in zip(self.inputs, self.labels):
                w.writerow([repr(float(v)) for v in x] + [int(y)])


def _standardized(raw, labels, name, reference):
    if reference is None:
        shift = raw.mean(axis=0)
        scale = raw.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        shift, scale = reference.shift, reference.scale
    return Dataset((raw - shift) / scale, labels, name, shift, scale, 2)


def gen_ellipse(n_per_class: int, seed: int = 0, noise: float = 0.02,
                axes=(1.0, 0.5), reference: Dataset | None = None) -> Dataset:
    """Two concentric elliptical annuli (inner radius 0.3-0.8, outer 1.2-1.8)."""
    if n_per_class < 1:
        raise ContractError("n_per_class must be at least 1")
    rng = np.random.default_rng(seed)
    a, b = axes
    pts, labels = [], []
    for c, (lo, hi) in enumerate([(0.3, 0.8), (1.2, 1.8)]):
        theta = rng.uniform(0.0, 2 * np.pi, n_per_class)
        r = rng.uniform(lo, hi, n_per_class)
        pts.append(np.column_stack([r * a * np.cos(theta), r * b * np.sin(theta)]))
        labels.append(np.full(n_per_class, c))
    raw = np.concatenate(pts)
    raw = raw + noise * rng.standard_normal(raw.shape)
    return _standardized(raw, np.concatenate(labels), "ellipse", reference)


def gen_swissroll(n_per_class: int, seed: int = 0, noise: float = 0.01,
                  reference: Dataset | None = None) -> Dataset:
    """Two spiral arms offset by half a turn, ``t`` uniform on ``[0, 3 pi]``."""
    if n_per_class < 1:
        raise ContractError("n_per_class must be at least 1")
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for c in range(2):
        t = rng.uniform(0.0, 3 * np.pi, n_per_class)
        r = (1.0 + t) / (1.0 + 3 * np.pi)
        pts.append(np.column_stack([r * np.cos(t + c * np.pi), r * np.sin(t + c * np.pi)]))
        labels.append(np.full(n_per_class, c))
    raw = np.concatenate(pts)
    raw = raw + noise * rng.standard_normal(raw.shape)
    return _standardized(raw, np.concatenate(labels), "swissroll", reference)


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic, ndim):
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise IDXFormatError(f"{path}: truncated header")
    found = struct.unpack(">i", buf[:4])[0]
    if found != magic:
        raise IDXFormatError(f"{path}: bad magic number {found}, expected {magic}")
    if len(buf) < 4 + 4 * ndim:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}i", buf[4:4 + 4 * ndim])
    body = buf[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise IDXFormatError(f"{path}: truncated payload ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Read an MNIST image/label IDX pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"count mismatch: {images_path} has {images.shape[0]} images, "
                             f"{labels_path} has {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64)
    dim = flat.shape[1]
    return Dataset(flat / 255.0, labels.astype(np.int64), "mnist",
                   np.zeros(dim), np.full(dim, 255.0), 10)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (images if 3-D, labels if 1-D); ``.gz`` paths are compressed."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim not in (1, 3):
        raise ContractError("IDX export supports 1-D labels and 3-D images")
    magic = {3: IMAGES_MAGIC, 1: LABELS_MAGIC}[array.ndim]
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">i", magic))
        fh.write(struct.pack(f">{array.ndim}i", *array.shape))
        fh.write(array.tobytes())


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled partition of ``range(n)`` for one epoch; the last batch may be short."""
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


class BatchStream:
    """Endless sequence of mini-batches; batch ``k`` is a pure function of ``(seed, k)``.

    The global batch index doubles as the batch identifier carried in messages.
    """

    def __init__(self, n: int, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.seed = seed
        self.per_epoch = -(-n // self.batch_size)
        self._cache = (None, None)

    def epoch(self, e: int) -> list[np.ndarray]:
        if self._cache[0] != e:
            self._cache = (e, batches(self.n, self.batch_size, self.seed, e))
        return self._cache[1]

    def __getitem__(self, k: int) -> np.ndarray:
        e, i = divmod(k, self.per_epoch)
        return self.epoch(e)[i]
