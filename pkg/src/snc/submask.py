"""Binary subnetwork codes and bit-packed code arithmetic.

A submask records which units of a layer are active for one example: bit j
is 1 iff unit j passed signal. Masks are packed into 64-bit words, bit j
living in word j // 64 at bit position j % 64 (LSB-first within
little-endian words), with padding bits beyond the mask length kept zero.
That layout is fixed so stores written by one process are portable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionError
from .model import (
    LWTA,
    MAXOUT,
    SIGMOID,
    ActivationKind,
    NetworkParams,
    block_winners,
    layer_signals,
    resolve_layer,
)

WORD_BITS = 64


@dataclass(frozen=True)
class Submask:
    """One bit-packed mask: words (ceil(u/64),) uint64 plus its bit length."""

    words: np.ndarray
    length_bits: int

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.ndim != 1:
            raise DimensionError("mask words must be one-dimensional")
        if words.shape[0] != word_count(self.length_bits):
            raise DimensionError(
                f"{self.length_bits}-bit mask needs {word_count(self.length_bits)} "
                f"words, got {words.shape[0]}"
            )
        words.flags.writeable = False
        object.__setattr__(self, "words", words)

    def __eq__(self, other):
        if not isinstance(other, Submask):
            return NotImplemented
        return self.length_bits == other.length_bits and np.array_equal(
            self.words, other.words
        )


def word_count(length_bits: int) -> int:
    return (length_bits + WORD_BITS - 1) // WORD_BITS


def pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (n, u) boolean matrix into (n, ceil(u/64)) uint64 rows."""
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    n, u = bits.shape
    words = word_count(u)
    packed = np.packbits(bits, axis=1, bitorder="little")
    padded = np.zeros((n, words * 8), dtype=np.uint8)
    padded[:, : packed.shape[1]] = packed
    return padded.view("<u8").astype(np.uint64, copy=False)


def unpack_rows(words: np.ndarray, length_bits: int) -> np.ndarray:
    """Inverse of pack_rows: (n, words) uint64 -> (n, u) uint8 in {0, 1}."""
    words = np.ascontiguousarray(words, dtype=np.uint64)
    as_bytes = words.view(np.uint8).reshape(words.shape[0], -1)
    return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :length_bits]


def pack(bits) -> Submask:
    """Pack a flat sequence of booleans into a Submask."""
    arr = np.asarray(bits, dtype=np.uint8).reshape(1, -1)
    u = arr.shape[1]
    if u == 0:
        return Submask(np.zeros(0, dtype=np.uint64), 0)
    return Submask(pack_rows(arr)[0], u)


def unpack(mask: Submask) -> np.ndarray:
    """Unpack a Submask back into a (u,) array of 0/1 values."""
    if mask.length_bits == 0:
        return np.zeros(0, dtype=np.uint8)
    return unpack_rows(mask.words.reshape(1, -1), mask.length_bits)[0]


def active_bits(z: np.ndarray, kind: ActivationKind) -> np.ndarray:
    """Per-unit activity bits for a batch of presynaptic rows: (n, u) uint8.

    ReLU: bit j = 1 iff z[j] > 0. LWTA and maxout: one bit per block, set on
    the unit attaining the block maximum (the winner keeps its bit even when
    its z is negative or exactly zero: it is still the unit that propagates
    signal). Ties go to the lowest index.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if kind.kind == SIGMOID:
        raise DimensionError("sigmoid layers have no gating; use threshold_mask")
    if kind.kind in (LWTA, MAXOUT):
        winners = block_winners(z, kind.block_size)
        n, blocks = winners.shape
        onehot = winners[:, :, None] == np.arange(kind.block_size)
        return onehot.reshape(n, blocks * kind.block_size).astype(np.uint8)
    return (z > 0).astype(np.uint8)


def extract_submask(z: np.ndarray, kind: ActivationKind) -> Submask:
    """Submask of one presynaptic vector under the given activation kind."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError("extract_submask expects a single vector")
    bits = active_bits(z, kind)
    return Submask(pack_rows(bits)[0], bits.shape[1])


def extract_submasks(z: np.ndarray, kind: ActivationKind) -> tuple[np.ndarray, int]:
    """Batch form: (n, width) presynaptic rows -> ((n, words) uint64, u)."""
    bits = active_bits(z, kind)
    return pack_rows(bits), bits.shape[1]


def threshold_mask(a: np.ndarray, theta: float) -> Submask:
    """Mask with bit j = 1 iff a[j] > theta (sigmoid-activation baseline)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    bits = (a > theta).astype(np.uint8)
    return Submask(pack_rows(bits.reshape(1, -1))[0], bits.shape[0])


def threshold_masks(a: np.ndarray, theta: float) -> tuple[np.ndarray, int]:
    """Batch form of threshold_mask: ((n, words) uint64, u)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    bits = (a > theta).astype(np.uint8)
    return pack_rows(bits), bits.shape[1]


def masks_from_signals(
    kind: ActivationKind,
    presyn: np.ndarray,
    postact: np.ndarray,
    theta: float | None = None,
) -> tuple[np.ndarray, int]:
    """Batch masks from layer signals: gating bits, or thresholded sigmoid."""
    if kind.kind == SIGMOID:
        if theta is None:
            raise ConfigurationError("sigmoid layers need a threshold (theta)")
        return threshold_masks(postact, theta)
    return extract_submasks(presyn, kind)


def masks_for_layer(
    net: NetworkParams,
    features: np.ndarray,
    layer_index: int = -1,
    theta: float | None = None,
) -> tuple[np.ndarray, int]:
    """Forward a feature matrix and extract per-example masks at one layer."""
    idx = resolve_layer(net, layer_index)
    postact, presyn = layer_signals(net, features, idx)
    return masks_from_signals(net.specs[idx].activation, presyn, postact, theta)


def hamming(a: Submask, b: Submask) -> int:
    """Count of differing bit positions between two equal-length masks."""
    if a.length_bits != b.length_bits:
        raise DimensionError(
            f"mask widths differ: {a.length_bits} vs {b.length_bits}"
        )
    if a.length_bits == 0:
        return 0
    return int(kernels.hamming_scan(a.words, b.words.reshape(1, -1))[0])
