# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror :mod:`nctree._pykernels`."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()


cdef inline int _popcount(uint64_t x) nogil:
    return __builtin_popcountll(x)

cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


def bin_sums(const int64_t[::1] bins, const double[:, ::1] values, Py_ssize_t nbins):
    """Row sums of ``values`` grouped by ``bins`` -> array (nbins, F)."""
    cdef Py_ssize_t n = values.shape[0], f = values.shape[1], r, c
    cdef int64_t b
    out = np.zeros((nbins, f), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(n):
            b = bins[r]
            for c in range(f):
                o[b, c] += values[r, c]
    return out


def enumerate_pair_table(uint64_t mask_i, uint64_t mask_j, int pos_i, int pos_j,
                         int m, double alpha, int q):
    """Exhaustive 4x4 exposure table for two units over ``m`` Bernoulli draws.

    Bit ``b`` of an assignment is the treatment of joint-set member ``b``;
    ``mask_i`` marks the out-neighbours of unit ``i`` inside the set.
    Cell index is ``w + 2 g``.
    """
    if m > 62:
        raise ValueError("joint set too large to enumerate")
    cdef double weights[64]
    cdef int t, wi, wj, gi, gj, ones
    for t in range(m + 1):
        weights[t] = (alpha ** t) * ((1.0 - alpha) ** (m - t))
    out = np.zeros((4, 4), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef uint64_t a, total = (<uint64_t>1) << m
    with nogil:
        a = 0
        while a < total:
            ones = _popcount(a)
            wi = (a >> pos_i) & 1
            wj = (a >> pos_j) & 1
            gi = 1 if _popcount(a & mask_i) >= q else 0
            gj = 1 if _popcount(a & mask_j) >= q else 0
            o[wi + 2 * gi, wj + 2 * gj] += weights[ones]
            a += 1
    return out
