"""IDX-format ingestion, normalization, deterministic shuffling and batching.

The IDX layout is big-endian: a 4-byte magic (0x00000803 for 3-dimensional
image files, 0x00000801 for 1-dimensional label files), one unsigned
32-bit extent per dimension, then the unsigned-byte payload.  Files may be
raw or gzip-compressed.  Parsing is bit-exact: re-serializing a parsed
file reproduces the input bytes.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


class IdxError(DataError):
    """Malformed IDX content."""


class IdxMagicError(IdxError):
    """Magic number is not an expected IDX magic."""


class IdxDimensionError(IdxError):
    """Header truncated or dimension count inconsistent with the magic."""


class IdxTruncatedError(IdxError):
    """Payload length disagrees with the product of the header extents."""


def parse_idx(raw: bytes) -> tuple[int, tuple[int, ...], np.ndarray]:
    """Parse IDX bytes into (magic, dims, flat uint8 payload).

    The payload is returned untransformed.  Distinct error types mark the
    failure mode: wrong magic, bad dimension header, or truncated payload.
    """
    if len(raw) < 4:
        raise IdxMagicError("file too short to hold an IDX magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise IdxMagicError(f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxDimensionError(f"header needs {ndim} dimension fields, file holds {(len(raw) - 4) // 4}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = raw[header_len:]
    if len(payload) != expected:
        raise IdxTruncatedError(f"header promises {expected} bytes, payload holds {len(payload)}")
    return magic, dims, np.frombuffer(payload, dtype=np.uint8)


def write_idx(magic: int, dims, payload: np.ndarray) -> bytes:
    """Serialize (magic, dims, payload) back to IDX bytes (inverse of parse)."""
    dims = tuple(int(d) for d in dims)
    if magic & 0xFF != len(dims):
        raise ValueError(f"magic 0x{magic:08x} encodes {magic & 0xFF} dims, got {len(dims)}")
    payload = np.ascontiguousarray(payload, dtype=np.uint8).reshape(-1)
    if payload.size != int(np.prod(dims, dtype=np.int64)):
        raise ValueError("payload size disagrees with dims")
    return struct.pack(f">{1 + len(dims)}I", magic, *dims) + payload.tobytes()


def _read_maybe_gzip(path: str) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(f) as g:
                return g.read()
        return f.read()


def _resolve(data_dir: str, stem: str) -> str:
    for name in (stem, stem + ".gz"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    raise DataError(f"missing {stem}[.gz] in {data_dir!r}")


@dataclass
class Dataset:
    """Images scaled to [0, 1] as float32 (N, 1, H, W) with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() > 9:
            raise DataError("labels must be class indices 0..9")

    def __len__(self):
        return len(self.images)

    def subset(self, n: int) -> "Dataset":
        if n <= 0 or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n])


def load_idx_images(path: str) -> np.ndarray:
    magic, dims, payload = parse_idx(_read_maybe_gzip(path))
    if magic != IMAGE_MAGIC:
        raise IdxDimensionError(f"{path}: expected an image file (magic 0x{IMAGE_MAGIC:08x})")
    n, h, w = dims
    return payload.reshape(n, h, w)


def load_idx_labels(path: str) -> np.ndarray:
    magic, dims, payload = parse_idx(_read_maybe_gzip(path))
    if magic != LABEL_MAGIC:
        raise IdxDimensionError(f"{path}: expected a label file (magic 0x{LABEL_MAGIC:08x})")
    return payload.copy()


def load_mnist(data_dir: str, split: str = "train", limit: int = 0) -> Dataset:
    """Load an MNIST split from IDX files (raw or gzipped) in ``data_dir``.

    Pixels are scaled by 1/255 to [0, 1].  ``limit`` > 0 keeps only the
    first ``limit`` samples.
    """
    if split == "train":
        images_stem, labels_stem = TRAIN_IMAGES, TRAIN_LABELS
    elif split == "test":
        images_stem, labels_stem = TEST_IMAGES, TEST_LABELS
    else:
        raise ValueError(f"unknown split {split!r}")
    raw = load_idx_images(_resolve(data_dir, images_stem))
    labels = load_idx_labels(_resolve(data_dir, labels_stem))
    images = (raw.astype(np.float32) / 255.0)[:, None, :, :]
    ds = Dataset(images, labels.astype(np.int64))
    return ds.subset(limit)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class BatchPlan:
    """A deterministic epoch order: same seed, same permutation."""

    batch_size: int
    seed: int
    order: np.ndarray

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        n = len(self.order)
        if sorted(self.order.tolist()) != list(range(n)):
            raise ValueError("order must be a permutation of 0..N-1")


def make_batch_plan(num_samples: int, batch_size: int, seed: int) -> BatchPlan:
    order = np.random.default_rng(seed).permutation(num_samples)
    return BatchPlan(batch_size=batch_size, seed=seed, order=order)


@dataclass
class Batch:
    images: np.ndarray       # (B, 1, H, W) float32 in [0, 1]
    labels: np.ndarray       # (B,) int
    onehot: np.ndarray       # (B, 10) float32


def one_hot(labels: np.ndarray, num_classes: int = 10) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def random_shift(images: np.ndarray, rng: np.random.Generator, max_shift: int = 2) -> np.ndarray:
    """Translate each image by uniform integer offsets in [-max_shift, max_shift],
    zero-filling the uncovered border."""
    out = np.zeros_like(images)
    n, _, h, w = images.shape
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(shifts):
        src = images[i, 0,
                     max(0, -dy):h - max(0, dy),
                     max(0, -dx):w - max(0, dx)]
        out[i, 0,
            max(0, dy):h - max(0, -dy),
            max(0, dx):w - max(0, -dx)] = src
    return out


def make_batches(dataset: Dataset, plan: BatchPlan, augment_rng: np.random.Generator | None = None):
    """Yield batches covering each sample exactly once, last partial kept.

    With ``augment_rng`` set, applies the +/-2 pixel random translation.
    """
    if len(dataset) == 0:
        raise DataError("cannot batch an empty dataset")
    if len(plan.order) != len(dataset):
        raise ValueError("plan order length disagrees with dataset size")
    for start in range(0, len(dataset), plan.batch_size):
        idx = plan.order[start:start + plan.batch_size]
        images = dataset.images[idx]
        if augment_rng is not None:
            images = random_shift(images, augment_rng)
        labels = dataset.labels[idx]
        yield Batch(images=images, labels=labels, onehot=one_hot(labels))
