"""Hot kernels for bit-packed code scans.

Hamming distances over packed uint64 words are the inner loop of every
query, so they are numba-compiled by default. Set SNC_NUMBA=0 in the
environment to force the pure-numpy fallbacks (identical results; used for
debugging and by benchmarks/bench_kernels.py). Both paths are exercised in
the test suite against bit-loop oracles.
"""

from __future__ import annotations

import os

import numpy as np

NUMBA_REQUESTED = os.environ.get("SNC_NUMBA", "1") != "0"

if NUMBA_REQUESTED:
    try:
        import numba
        from numba import njit, prange

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a hard dependency
        HAS_NUMBA = False
else:
    HAS_NUMBA = False


def backend() -> str:
    """Name of the active kernel backend: "numba" or "numpy"."""
    return "numba" if HAS_NUMBA else "numpy"


def set_threads(n: int) -> None:
    """Cap kernel parallelism at n threads; n = 0 keeps the library default."""
    if HAS_NUMBA and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# pure-numpy fallbacks

# rows per XOR buffer; bounds peak temporary memory at ~chunk * words * 8 bytes
_CHUNK_ROWS = 1 << 17


def _hamming_scan_np(query: np.ndarray, codes: np.ndarray) -> np.ndarray:
    n = codes.shape[0]
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, _CHUNK_ROWS):
        stop = min(start + _CHUNK_ROWS, n)
        out[start:stop] = np.bitwise_count(codes[start:stop] ^ query).sum(
            axis=1, dtype=np.int64
        )
    return out


def _hamming_many_np(queries: np.ndarray, codes: np.ndarray) -> np.ndarray:
    q = queries.shape[0]
    out = np.empty((q, codes.shape[0]), dtype=np.int32)
    for i in range(q):
        out[i] = _hamming_scan_np(queries[i], codes)
    return out


# ---------------------------------------------------------------------------
# numba kernels

if HAS_NUMBA:

    @njit(cache=True, nogil=True, inline="always")
    def _popcount_u64(x):
        x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
        x = (x & np.uint64(0x3333333333333333)) + (
            (x >> np.uint64(2)) & np.uint64(0x3333333333333333)
        )
        x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
        return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)

    @njit(cache=True, nogil=True)
    def _hamming_scan_nb(query, codes):
        n, w = codes.shape
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            s = 0
            for j in range(w):
                s += int(_popcount_u64(query[j] ^ codes[i, j]))
            out[i] = s
        return out

    @njit(cache=True, nogil=True, parallel=True)
    def _hamming_many_nb(queries, codes):
        q, w = queries.shape
        n = codes.shape[0]
        out = np.empty((q, n), dtype=np.int32)
        for qi in prange(q):
            for i in range(n):
                s = 0
                for j in range(w):
                    s += int(_popcount_u64(queries[qi, j] ^ codes[i, j]))
                out[qi, i] = np.int32(s)
        return out


def hamming_scan(query: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """XOR + popcount distances from one packed query row to all code rows.

    query: (words,) uint64; codes: (n, words) uint64 -> (n,) int64.
    """
    if HAS_NUMBA:
        return _hamming_scan_nb(query, codes)
    return _hamming_scan_np(query, codes)


def hamming_many(queries: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Distance block for a batch of packed queries: (q, n) int32.

    Callers chunk the query axis to bound the output allocation.
    """
    if HAS_NUMBA:
        return _hamming_many_nb(queries, codes)
    return _hamming_many_np(queries, codes)


def smallest_k(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest distances, ties broken by ascending index.

    Exact: matches a full stable sort, but costs O(n) for k << n.
    """
    n = dist.shape[0]
    if k >= n:
        return np.argsort(dist, kind="stable")
    part = np.argpartition(dist, k - 1)[:k]
    kth = dist[part].max()
    below = np.flatnonzero(dist < kth)  # at most k-1 entries, ascending index
    at = np.flatnonzero(dist == kth)
    idx = np.concatenate([below, at[: k - below.size]])
    return idx[np.argsort(dist[idx], kind="stable")]
