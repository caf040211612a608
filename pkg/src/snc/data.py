"""Dataset ingestion and generation.

IDX is the big-endian binary container used by the MNIST distribution:
magic 2051 for image files (count x rows x cols of unsigned bytes), 2049
for label files. Pixels are scaled to [0, 1] on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError
from .io import atomic_write_bytes

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int32
    class_count: int
    ids: np.ndarray  # (n,) int64, unique
    image_shape: tuple[int, int] | None = None  # (rows, cols) when IDX-backed

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise DimensionError(
                f"inconsistent dataset: {n} rows, {self.labels.shape[0]} labels, "
                f"{self.ids.shape[0]} ids"
            )
        if not np.all(np.isfinite(self.features)):
            raise DimensionError("dataset features must be finite")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DimensionError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, indices: np.ndarray) -> "Dataset":
        """Row subset preserving labels, ids, and image shape."""
        return replace(
            self,
            features=self.features[indices],
            labels=self.labels[indices],
            ids=self.ids[indices],
        )


def _read_be_u32(data: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(data):
        raise FormatError(f"truncated {what} at offset {offset}")
    return struct.unpack_from(">I", data, offset)[0]


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Parse a paired IDX image/label file set; pixels are scaled by 1/255."""
    img = Path(images_path).read_bytes()
    magic = _read_be_u32(img, 0, "image header")
    if magic != IMAGE_MAGIC:
        raise FormatError(
            f"bad image magic {magic} at offset 0 in {images_path} "
            f"(expected {IMAGE_MAGIC})"
        )
    count = _read_be_u32(img, 4, "image count")
    rows = _read_be_u32(img, 8, "image rows")
    cols = _read_be_u32(img, 12, "image cols")
    expected = count * rows * cols
    if len(img) - 16 != expected:
        raise FormatError(
            f"image payload at offset 16: expected {expected} bytes, "
            f"found {len(img) - 16}"
        )

    lab = Path(labels_path).read_bytes()
    magic = _read_be_u32(lab, 0, "label header")
    if magic != LABEL_MAGIC:
        raise FormatError(
            f"bad label magic {magic} at offset 0 in {labels_path} "
            f"(expected {LABEL_MAGIC})"
        )
    lab_count = _read_be_u32(lab, 4, "label count")
    if len(lab) - 8 != lab_count:
        raise FormatError(
            f"label payload at offset 8: expected {lab_count} bytes, "
            f"found {len(lab) - 8}"
        )
    if lab_count != count:
        raise FormatError(
            f"image/label count mismatch: {count} images vs {lab_count} labels"
        )

    pixels = np.frombuffer(img, dtype=np.uint8, offset=16)
    features = (pixels.astype(np.float64) / 255.0).reshape(count, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int32)
    if class_count is None:
        class_count = int(labels.max()) + 1 if count else 0
    return Dataset(
        features=features,
        labels=labels,
        class_count=class_count,
        ids=np.arange(count, dtype=np.int64),
        image_shape=(rows, cols),
    )


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset back to IDX; inverse of load_idx for valid files."""
    if dataset.image_shape is None:
        raise ConfigurationError("dataset has no image shape; cannot write IDX")
    rows, cols = dataset.image_shape
    if rows * cols != dataset.features.shape[1]:
        raise DimensionError(
            f"image shape {rows}x{cols} does not match feature dim "
            f"{dataset.features.shape[1]}"
        )
    lo, hi = dataset.features.min(initial=0.0), dataset.features.max(initial=0.0)
    if lo < 0.0 or hi > 1.0:
        raise ConfigurationError(
            f"features must lie in [0, 1] for IDX export, found [{lo}, {hi}]"
        )
    pixels = np.rint(dataset.features * 255.0).astype(np.uint8)
    n = len(dataset)
    atomic_write_bytes(
        images_path,
        struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pixels.tobytes(),
    )
    atomic_write_bytes(
        labels_path,
        struct.pack(">II", LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes(),
    )


def synthetic_blobs(
    class_count: int, per_class: int, dim: int, spread: float, seed: int
) -> Dataset:
    """Isotropic Gaussian blobs, one seeded random center per class."""
    if class_count < 1 or per_class < 1 or dim < 1:
        raise ConfigurationError("class_count, per_class, and dim must be positive")
    if spread < 0:
        raise ConfigurationError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.random((class_count, dim))
    n = class_count * per_class
    features = np.repeat(centers, per_class, axis=0)
    if spread > 0:
        features = features + spread * rng.standard_normal((n, dim))
    labels = np.repeat(np.arange(class_count, dtype=np.int32), per_class)
    return Dataset(
        features=features,
        labels=labels,
        class_count=class_count,
        ids=np.arange(n, dtype=np.int64),
    )


def split(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded, class-stratified partition into (train, val); ids are disjoint."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    val_parts, train_parts = [], []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        perm = rng.permutation(members)
        n_val = int(np.floor(val_fraction * members.size + 0.5))
        val_parts.append(perm[:n_val])
        train_parts.append(perm[n_val:])
    val_idx = rng.permutation(np.concatenate(val_parts))
    train_idx = rng.permutation(np.concatenate(train_parts))
    return dataset.take(train_idx), dataset.take(val_idx)
