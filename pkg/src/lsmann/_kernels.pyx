# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Euclidean distance, sign-projection hashing,
and packed-code collision counting.

Must stay numerically interchangeable with `_kernels_py`: distances
accumulate in float64, hash bit j is 1 iff the projection dot product
is >= 0, and codes pack LSB-first into little-endian uint64 words.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

BACKEND = "compiled"


cdef inline unsigned long long _popcount64(unsigned long long x) nogil:
    x = x - ((x >> 1) & <unsigned long long> 0x5555555555555555)
    x = (x & <unsigned long long> 0x3333333333333333) + \
        ((x >> 2) & <unsigned long long> 0x3333333333333333)
    x = (x + (x >> 4)) & <unsigned long long> 0x0F0F0F0F0F0F0F0F
    return (x * <unsigned long long> 0x0101010101010101) >> 56


def euclidean(const float[::1] a, const float[::1] b):
    """L2 distance between two float32 vectors of equal length."""
    if a.shape[0] != b.shape[0]:
        raise ValueError("dimension mismatch")
    cdef Py_ssize_t i, d = a.shape[0]
    cdef double acc = 0.0, diff
    for i in range(d):
        diff = <double> a[i] - <double> b[i]
        acc += diff * diff
    return sqrt(acc)


def euclidean_batch(const float[::1] q, const float[:, ::1] x):
    """L2 distances from ``q`` to every row of ``x``."""
    if q.shape[0] != x.shape[1]:
        raise ValueError("dimension mismatch")
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] out_v = out
    cdef double acc, diff
    for i in range(n):
        acc = 0.0
        for j in range(d):
            diff = <double> q[j] - <double> x[i, j]
            acc += diff * diff
        out_v[i] = sqrt(acc)
    return out


def simhash_codes(const float[:, ::1] x, const float[:, ::1] proj):
    """Packed sign codes for each row of ``x`` under projections ``proj``.

    Bit j of a code is 1 iff dot(row, proj[j]) >= 0; bit j lives in word
    j // 64 at position j % 64.
    """
    if x.shape[1] != proj.shape[1]:
        raise ValueError("dimension mismatch")
    cdef Py_ssize_t i, j, k, n = x.shape[0], m = proj.shape[0], d = proj.shape[1]
    cdef Py_ssize_t words = (m + 63) // 64
    cdef cnp.ndarray[cnp.uint64_t, ndim=2] out = np.zeros((n, words), dtype=np.uint64)
    cdef unsigned long long[:, ::1] out_v = out
    cdef double acc
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                acc += <double> x[i, k] * <double> proj[j, k]
            if acc >= 0.0:
                out_v[i, j >> 6] |= (<unsigned long long> 1) << (j & 63)
    return out


def collision_counts(const unsigned long long[::1] q_code,
                     const unsigned long long[:, ::1] codes,
                     Py_ssize_t m):
    """Matching-bit counts (m minus Hamming distance) per row of ``codes``."""
    if codes.shape[1] != q_code.shape[0]:
        raise ValueError("code length mismatch")
    cdef Py_ssize_t i, w, n = codes.shape[0], words = q_code.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(n, dtype=np.int64)
    cdef long long[::1] out_v = out
    cdef unsigned long long ham
    for i in range(n):
        ham = 0
        for w in range(words):
            ham += _popcount64(q_code[w] ^ codes[i, w])
        out_v[i] = m - <long long> ham
    return out
