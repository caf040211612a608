import os
import subprocess
import sys

import numpy as np
import pytest

from snc import kernels


def test_backend_reports_numba_by_default():
    assert kernels.backend() == "numba"


def test_numpy_env_flag_selects_fallback():
    env = dict(os.environ, SNC_NUMBA="0")
    out = subprocess.run(
        [sys.executable, "-c", "from snc import kernels; print(kernels.backend())"],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_backends_agree_on_random_codes():
    rng = np.random.default_rng(11)
    codes = rng.integers(0, 2**63, size=(500, 7), dtype=np.uint64)
    queries = rng.integers(0, 2**63, size=(20, 7), dtype=np.uint64)
    for q in queries:
        np.testing.assert_array_equal(
            kernels._hamming_scan_np(q, codes), kernels.hamming_scan(q, codes)
        )
    np.testing.assert_array_equal(
        kernels._hamming_many_np(queries, codes), kernels.hamming_many(queries, codes)
    )


def test_smallest_k_matches_stable_sort():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(1, 60))
        dist = rng.integers(0, 6, size=n)  # heavy ties
        k = int(rng.integers(1, n + 1))
        expected = np.argsort(dist, kind="stable")[:k]
        np.testing.assert_array_equal(kernels.smallest_k(dist, k), expected)


def test_smallest_k_handles_k_beyond_n():
    dist = np.array([5, 1, 1, 3])
    np.testing.assert_array_equal(kernels.smallest_k(dist, 10), [1, 2, 3, 0])


def test_set_threads_accepts_zero_and_positive():
    kernels.set_threads(0)
    kernels.set_threads(1)
    kernels.set_threads(10_000)  # clamped to the library maximum
