"""MNIST IDX ingestion, binarization, column conditioning, ring data, batching.

IDX files are big-endian: a 4-byte magic (0x00000803 for uint8 rank-3
images, 0x00000801 for uint8 rank-1 labels), one uint32 per dimension, then
the raw bytes in row-major order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Header magic or dimensions are not what the container requires."""


class IdxTruncatedError(IdxFormatError):
    """The payload is shorter than the header promises."""


class IdxCountMismatchError(ValueError):
    """Image and label files disagree on the number of examples."""


@dataclass(frozen=True)
class Dataset:
    examples: np.ndarray
    labels: Optional[np.ndarray] = None
    image_h: Optional[int] = None
    image_w: Optional[int] = None

    def __post_init__(self):
        x = self.examples
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("examples must be a non-empty n x D matrix")
        if x.min() < 0.0 or x.max() > 1.0:
            raise ValueError("examples must lie in [0, 1]")
        if self.image_h is not None and self.image_h * self.image_w != x.shape[1]:
            raise ValueError(f"{self.image_h}x{self.image_w} image does not match D={x.shape[1]}")
        if self.labels is not None and len(self.labels) != x.shape[0]:
            raise ValueError("labels and examples differ in length")

    def __len__(self):
        return self.examples.shape[0]

    @property
    def n_features(self) -> int:
        return self.examples.shape[1]

    def subset(self, n: int) -> "Dataset":
        """First ``n`` examples (all of them when n exceeds the size)."""
        labels = None if self.labels is None else self.labels[:n]
        return Dataset(self.examples[:n], labels, self.image_h, self.image_w)


def _read_idx(path, magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (observed,) = struct.unpack(">I", raw[:4])
    if observed != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{observed:08X}, expected 0x{magic:08X}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(">" + "I" * rank, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxTruncatedError(f"{path}: expected {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read IDX images (and optionally labels); pixels are scaled by 1/255."""
    images = _read_idx(images_path, IMAGES_MAGIC)
    n, h, w = images.shape
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, LABELS_MAGIC).astype(np.int64)
        if len(labels) != n:
            raise IdxCountMismatchError(f"{n} images but {len(labels)} labels")
    return Dataset(images.reshape(n, h * w).astype(np.float64) / 255.0, labels, h, w)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write an (n, h, w) array of bytes, or of floats in [0,1] rounded to 8 bits."""
    a = np.asarray(images)
    if a.dtype != np.uint8:
        a = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    if a.ndim != 3:
        raise ValueError("images must have shape (n, h, w)")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *a.shape))
        fh.write(a.tobytes())


def write_idx_labels(path, labels) -> None:
    a = np.asarray(labels, dtype=np.uint8).reshape(-1)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, a.size))
        fh.write(a.tobytes())


def stochastic_binarize(x, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(x_i) draws; every call resamples."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("binarize: values must lie in [0, 1]")
    return (rng.random(x.shape) < x).astype(np.float64)


@dataclass(frozen=True)
class ConditioningSpec:
    """Which pixel column is the condition, and whether it is binarized each
    time it is presented to a network."""

    column_index: int = 14
    binarize: bool = True

    def present(self, x_cond: np.ndarray, rng: Optional[np.random.Generator]) -> np.ndarray:
        if self.binarize:
            if rng is None:
                raise ValueError("binarized conditioning needs an rng")
            return stochastic_binarize(x_cond, rng)
        return x_cond


def column_condition(dataset: Dataset, spec: ConditioningSpec,
                     rng: Optional[np.random.Generator] = None):
    """Split images into (column, full image) pairs.

    Without ``rng`` the raw column is returned and binarization is left to
    :meth:`ConditioningSpec.present` at presentation time. With ``rng`` (and
    ``spec.binarize``) a fresh binarization is drawn now.
    """
    if dataset.image_w is None:
        raise ValueError("dataset is not image-shaped")
    if not 0 <= spec.column_index < dataset.image_w:
        raise IndexError(f"column {spec.column_index} outside image width {dataset.image_w}")
    imgs = dataset.examples.reshape(-1, dataset.image_h, dataset.image_w)
    x_cond = imgs[:, :, spec.column_index].copy()
    if rng is not None:
        x_cond = spec.present(x_cond, rng)
    return x_cond, dataset.examples


def ring_map(z: np.ndarray) -> np.ndarray:
    """g(z) = z/10 + z/||z|| row-wise, with g(0) = 0."""
    z = np.asarray(z, dtype=np.float64)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, z / 10.0 + z / safe, 0.0)


def ring_generate(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return ring_map(rng.standard_normal((n, 2)))


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batches(dataset, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Yield row-index arrays of a shuffled pass; the last batch may be short.

    The order is a pure function of (seed, epoch). ``dataset`` may be a
    :class:`Dataset`, an array, or an int row count.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = dataset if isinstance(dataset, int) else len(dataset)
    order = batch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
