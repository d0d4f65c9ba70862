"""Compiled and pure-Python kernels must agree with each other and with plain loops."""

import importlib
import itertools
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nctree import _pykernels, kernels

try:
    from nctree import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = [pytest.param(_pykernels, id="python")]
BACKENDS.append(
    pytest.param(_ckernels, id="cython", marks=pytest.mark.skipif(_ckernels is None, reason="extension not built"))
)


def loop_bin_sums(bins, values, nbins):
    out = np.zeros((nbins, values.shape[1]))
    for b, row in zip(bins, values):
        out[b] += row
    return out


def loop_pair_table(mask_i, mask_j, pos_i, pos_j, m, alpha, q):
    out = np.zeros((4, 4))
    for bits in itertools.product((0, 1), repeat=m):
        k = sum(bits)
        p = alpha**k * (1 - alpha) ** (m - k)
        gi = sum(bits[t] for t in range(m) if mask_i >> t & 1) >= q
        gj = sum(bits[t] for t in range(m) if mask_j >> t & 1) >= q
        out[bits[pos_i] + 2 * gi, bits[pos_j] + 2 * gj] += p
    return out


@pytest.mark.parametrize("backend", BACKENDS)
class TestBackends:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 60), st.integers(1, 5), st.integers(0, 2**31))
    def test_bin_sums(self, backend, nbins, n, cols, seed):
        rng = np.random.default_rng(seed)
        bins = rng.integers(0, nbins, n).astype(np.int64)
        values = np.ascontiguousarray(rng.standard_normal((n, cols)))
        np.testing.assert_allclose(backend.bin_sums(bins, values, nbins), loop_bin_sums(bins, values, nbins), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31), st.sampled_from([0.3, 0.5, 0.7]), st.integers(1, 3))
    def test_pair_table(self, backend, m, seed, alpha, q):
        rng = np.random.default_rng(seed)
        pos_i, pos_j = (int(v) for v in rng.choice(m, 2, replace=False))
        mask_i = int(sum(1 << t for t in range(m) if t != pos_i and rng.random() < 0.5))
        mask_j = int(sum(1 << t for t in range(m) if t != pos_j and rng.random() < 0.5))
        got = backend.enumerate_pair_table(mask_i, mask_j, pos_i, pos_j, m, alpha, q)
        np.testing.assert_allclose(got, loop_pair_table(mask_i, mask_j, pos_i, pos_j, m, alpha, q), atol=1e-12)

    def test_empty_bins(self, backend):
        out = backend.bin_sums(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), 4)
        assert out.shape == (4, 3) and not out.any()


@pytest.mark.skipif(_ckernels is None, reason="extension not built")
def test_backends_identical_on_large_input():
    rng = np.random.default_rng(7)
    bins = rng.integers(0, 50, 100_000).astype(np.int64)
    values = np.ascontiguousarray(rng.standard_normal((100_000, 17)))
    np.testing.assert_allclose(_ckernels.bin_sums(bins, values, 50), _pykernels.bin_sums(bins, values, 50), rtol=1e-12, atol=1e-9)
    a = _ckernels.enumerate_pair_table(0b1011010, 0b0110101, 0, 7, 12, 0.4, 2)
    b = _pykernels.enumerate_pair_table(0b1011010, 0b0110101, 0, 7, 12, 0.4, 2)
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_backend_selection_env():
    code = "from nctree import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, NCTREE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_default_backend_reported():
    importlib.reload(kernels)
    assert kernels.BACKEND == ("cython" if _ckernels is not None else "python")
