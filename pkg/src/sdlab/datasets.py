"""Toy datasets, IDX ingestion and stratified splits.

IDX layout (all header integers are big-endian uint32)::

    images: magic 0x00000803 | count | rows | cols | count*rows*cols uint8 pixels
    labels: magic 0x00000801 | count | count uint8 labels

Gzip-compressed files are detected by their ``1f 8b`` prefix and read
transparently.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass(eq=False)
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        if len(self.labels) != len(self.features) or len(self.labels) == 0:
            raise ValueError("dataset needs n >= 1 rows and one label per row")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def batch(self, idx) -> LabeledBatch:
        return LabeledBatch(self.features[idx], self.labels[idx])

    def subset(self, idx, name: str | None = None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count, name or self.name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def make_blobs(classes: int, per_class: int, dim: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters with standard deviation ``spread``.

    Class ``c`` is centred at angle ``2*pi*c/classes`` on the unit circle in
    the first two coordinates (remaining coordinates zero). With ``dim == 1``
    the centres sit at ``c`` on the line.
    """
    if classes < 2 or per_class < 1 or dim < 1:
        raise ValueError("need classes >= 2, per_class >= 1 and dim >= 1")
    if not spread > 0:
        raise ValueError("spread must be positive")
    centers = np.zeros((classes, dim))
    if dim == 1:
        centers[:, 0] = np.arange(classes)
    else:
        angle = 2 * np.pi * np.arange(classes) / classes
        centers[:, 0], centers[:, 1] = np.cos(angle), np.sin(angle)
    rng = _rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    features = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    return Dataset(features, labels, classes, "blobs")


def make_rings(classes: int, per_class: int, noise: float, seed: int) -> Dataset:
    """Concentric 2D rings; class ``c`` has radius ``(c + 1) / classes`` plus Gaussian noise."""
    if classes < 2 or per_class < 1:
        raise ValueError("need classes >= 2 and per_class >= 1")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = _rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    theta = rng.uniform(0.0, 2 * np.pi, len(labels))
    radius = (labels + 1) / classes + noise * rng.standard_normal(len(labels))
    features = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return Dataset(features, labels, classes, "rings")


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (EOFError, OSError) as exc:
            raise IdxTruncatedError(f"{path}: truncated gzip stream") from exc
    return raw


def _parse_header(raw: bytes, path, magic: int, n_dims: int) -> tuple[int, ...]:
    size = 4 * (1 + n_dims)
    if len(raw) < size:
        raise IdxTruncatedError(f"{path}: file shorter than its {size}-byte header")
    found, *dims = struct.unpack(f">{1 + n_dims}I", raw[:size])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return tuple(dims)


def read_idx_images(path) -> np.ndarray:
    """uint8 array of shape (count, rows, cols)."""
    raw = _read_bytes(path)
    count, rows, cols = _parse_header(raw, path, IMAGES_MAGIC, 3)
    need = count * rows * cols
    body = raw[16:]
    if len(body) < need:
        raise IdxTruncatedError(f"{path}: {len(body)} pixel bytes, header declares {need}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (count,) = _parse_header(raw, path, LABELS_MAGIC, 1)
    body = raw[8:]
    if len(body) < count:
        raise IdxTruncatedError(f"{path}: {len(body)} label bytes, header declares {count}")
    return np.frombuffer(body, dtype=np.uint8, count=count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_idx(images_path, labels_path, limit_per_class: int | None = None, seed: int = 0) -> Dataset:
    """Load an IDX image/label pair as a flattened Dataset with pixels in [0, 1].

    With ``limit_per_class`` the rows are shuffled with ``seed`` and the first
    ``limit_per_class`` of each class are kept (in original file order).
    """
    for p in (images_path, labels_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path).astype(np.int64)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) == 0:
        raise IdxError("IDX files contain no examples")
    k = int(labels.max()) + 1
    keep = np.arange(len(labels))
    if limit_per_class is not None:
        if limit_per_class < 1:
            raise ValueError("limit_per_class must be positive")
        order = _rng(seed).permutation(len(labels))
        chosen = [order[labels[order] == c][:limit_per_class] for c in range(k)]
        keep = np.sort(np.concatenate(chosen))
    features = images[keep].reshape(len(keep), -1).astype(np.float64) / 255.0
    name = os.path.basename(str(images_path))
    return Dataset(features, labels[keep], max(k, 2), name)


def split(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/validation split; each class contributes
    ``round(n_c * val_fraction)`` rows to validation (at least one row stays
    in train). Rows keep their original relative order."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = _rng(seed)
    val_idx = []
    for c in range(data.class_count):
        rows = np.flatnonzero(data.labels == c)
        if rows.size == 0:
            continue
        n_val = min(int(round(rows.size * val_fraction)), rows.size - 1)
        val_idx.append(rng.permutation(rows)[:n_val])
    val_idx = np.sort(np.concatenate(val_idx)) if val_idx else np.array([], dtype=np.int64)
    is_val = np.zeros(len(data), dtype=bool)
    is_val[val_idx] = True
    if not is_val.any():
        raise ValueError("validation split would be empty")
    train_idx = np.flatnonzero(~is_val)
    return data.subset(train_idx, data.name), data.subset(val_idx, data.name)
