"""Immutable retrieval index over labeled bit-packed codes.

Queries are an exact linear Hamming scan (desk-scale N keeps that fast and
oracle-checkable). Distance ties are broken by ascending insertion order so
rankings are deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, EmptyStoreError, FormatError
from .io import atomic_write_bytes
from .submask import Submask, word_count

INVERSE_DISTANCE_EPS = 1e-6
WEIGHTINGS = ("uniform", "inverse_distance")


@dataclass(frozen=True)
class Neighbor:
    id: int
    label: int
    distance: int


@dataclass(frozen=True)
class CodeStore:
    codes: np.ndarray  # (n, words) uint64, rows in insertion order
    labels: np.ndarray  # (n,) int32
    ids: np.ndarray  # (n,) int64
    length_bits: int
    class_count: int

    def __post_init__(self):
        for name in ("codes", "labels", "ids"):
            getattr(self, name).flags.writeable = False

    def __len__(self) -> int:
        return self.codes.shape[0]


def build(codes, labels, ids, length_bits: int | None = None, class_count: int | None = None) -> CodeStore:
    """Assemble a store from packed code rows (or Submask list) plus metadata."""
    if isinstance(codes, np.ndarray):
        code_rows = np.ascontiguousarray(codes, dtype=np.uint64)
        if code_rows.ndim != 2:
            raise DimensionError("code matrix must be 2-dimensional")
        if length_bits is None:
            raise DimensionError("length_bits is required with a raw code matrix")
    else:
        masks = list(codes)
        if masks and length_bits is None:
            length_bits = masks[0].length_bits
        for i, m in enumerate(masks):
            if m.length_bits != length_bits:
                raise DimensionError(
                    f"code {i} has {m.length_bits} bits, expected {length_bits}"
                )
        length_bits = length_bits or 0
        code_rows = (
            np.stack([m.words for m in masks])
            if masks
            else np.zeros((0, word_count(length_bits)), dtype=np.uint64)
        )
    if code_rows.shape[1] != word_count(length_bits):
        raise DimensionError(
            f"{length_bits}-bit codes need {word_count(length_bits)} words per row, "
            f"got {code_rows.shape[1]}"
        )
    labels = np.ascontiguousarray(labels, dtype=np.int32)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    n = code_rows.shape[0]
    if labels.shape != (n,) or ids.shape != (n,):
        raise DimensionError(
            f"ragged store input: {n} codes, {labels.shape[0]} labels, "
            f"{ids.shape[0]} ids"
        )
    if class_count is None:
        class_count = int(labels.max()) + 1 if n else 0
    if n and (labels.min() < 0 or labels.max() >= class_count):
        raise DimensionError(f"labels must lie in [0, {class_count})")
    return CodeStore(code_rows, labels, ids, int(length_bits), int(class_count))


def _query_words(store: CodeStore, query: Submask | np.ndarray) -> np.ndarray:
    if isinstance(query, Submask):
        if query.length_bits != store.length_bits:
            raise DimensionError(
                f"query width {query.length_bits} does not match store width "
                f"{store.length_bits}"
            )
        return query.words
    words = np.ascontiguousarray(query, dtype=np.uint64)
    if words.shape != (store.codes.shape[1],):
        raise DimensionError("packed query row does not match store word count")
    return words


def _ranked_rows(
    store: CodeStore, query, k: int, exclude_id: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Row indices and distances of the k nearest codes, tie rule applied."""
    if len(store) == 0:
        raise EmptyStoreError("empty store")
    if k < 1:
        raise DimensionError("k must be positive")
    dist = kernels.hamming_scan(_query_words(store, query), store.codes)
    valid = len(store)
    if exclude_id is not None:
        excluded = store.ids == exclude_id
        if excluded.any():
            # sentinel beyond any real distance; never selected while k <= valid
            dist = np.where(excluded, store.length_bits + 1, dist)
            valid -= int(excluded.sum())
    if valid == 0:
        raise EmptyStoreError("empty store after excluding the query id")
    rows = kernels.smallest_k(dist, min(k, valid))
    return rows, dist[rows]


def topk(
    store: CodeStore, query, k: int, exclude_id: int | None = None
) -> list[Neighbor]:
    """The k nearest stored codes, ascending distance, ties by insertion order."""
    rows, dists = _ranked_rows(store, query, k, exclude_id)
    return [
        Neighbor(int(store.ids[r]), int(store.labels[r]), int(d))
        for r, d in zip(rows, dists)
    ]


def vote(labels: np.ndarray, distances: np.ndarray, weighting: str, class_count: int) -> np.ndarray:
    """Per-class vote scores for one neighbor list."""
    if weighting not in WEIGHTINGS:
        raise DimensionError(f"unknown weighting {weighting!r}")
    if weighting == "uniform":
        weights = np.ones(len(labels))
    else:
        weights = 1.0 / (np.asarray(distances, dtype=np.float64) + INVERSE_DISTANCE_EPS)
    return np.bincount(labels, weights=weights, minlength=class_count)


def knn_classify(
    store: CodeStore,
    query,
    k: int,
    weighting: str = "inverse_distance",
    exclude_id: int | None = None,
) -> tuple[int, np.ndarray]:
    """Weighted kNN vote over the store; ties go to the lowest class index."""
    rows, dists = _ranked_rows(store, query, k, exclude_id)
    scores = vote(store.labels[rows], dists, weighting, store.class_count)
    return int(np.argmax(scores)), scores


# ---------------------------------------------------------------------------
# store file format: magic "SBMK", version u32 LE, N u64 LE, length_bits u32
# LE, class_count u32 LE, N code rows of ceil(u/64) u64 LE words, N labels
# i32 LE, N ids i64 LE.

STORE_MAGIC = b"SBMK"
STORE_VERSION = 1


def save(store: CodeStore, path) -> None:
    header = STORE_MAGIC + struct.pack(
        "<IQII", STORE_VERSION, len(store), store.length_bits, store.class_count
    )
    body = (
        np.ascontiguousarray(store.codes, dtype="<u8").tobytes()
        + np.ascontiguousarray(store.labels, dtype="<i4").tobytes()
        + np.ascontiguousarray(store.ids, dtype="<i8").tobytes()
    )
    atomic_write_bytes(path, header + body)


def load(path) -> CodeStore:
    """Read a store file; truncation or bad fields raise FormatError."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24:
        raise FormatError(f"truncated store header: {len(data)} bytes")
    if data[:4] != STORE_MAGIC:
        raise FormatError(f"bad store magic {data[:4]!r} at offset 0")
    version, n, length_bits, class_count = struct.unpack_from("<IQII", data, 4)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}")
    words = word_count(length_bits)
    expected = 24 + n * (8 * words + 4 + 8)
    if len(data) != expected:
        raise FormatError(
            f"corrupt store: expected {expected} bytes, found {len(data)}"
        )
    offset = 24
    codes = np.frombuffer(data, dtype="<u8", count=n * words, offset=offset)
    codes = codes.reshape(n, words).astype(np.uint64)
    offset += 8 * n * words
    labels = np.frombuffer(data, dtype="<i4", count=n, offset=offset).astype(np.int32)
    offset += 4 * n
    ids = np.frombuffer(data, dtype="<i8", count=n, offset=offset).astype(np.int64)
    return build(codes, labels, ids, length_bits=length_bits, class_count=class_count)
