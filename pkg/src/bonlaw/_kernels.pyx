# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled subsample-and-select kernel; mirrors ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY
from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef enum:
    ORACLE = 0
    RANDOM = 1
    MEAN = 2
    LCB = 3
    UCB = 4
    VARFILTER = 5
    SNR = 6

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL


cdef inline uint64_t _mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline bint _key_less(uint64_t ka, Py_ssize_t ja, uint64_t kb, Py_ssize_t jb) noexcept nogil:
    return ka < kb or (ka == kb and ja < jb)


cdef inline double _snr(double m, double v) noexcept nogil:
    cdef double sd = sqrt(v)
    if sd > 0:
        return m / sd
    if m > 0:
        return INFINITY
    if m < 0:
        return -INFINITY
    return 0.0


cdef void _sort_small(Py_ssize_t* a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j, t
    for i in range(1, n):
        t = a[i]
        j = i - 1
        while j >= 0 and a[j] > t:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = t


def subsample_select(
    const double[:, ::1] true,
    const double[:, ::1] mean,
    const double[:, ::1] var,
    const int64_t[::1] sizes,
    const uint64_t[::1] cell_keys,
    Py_ssize_t n,
    int code,
    double beta,
    Py_ssize_t keep,
):
    cdef Py_ssize_t n_pools = true.shape[0]
    cdef Py_ssize_t width = true.shape[1]
    out_arr = np.empty(n_pools, dtype=np.float64)
    cdef double[::1] out = out_arr
    if n < 1 or n > width:
        raise ValueError("subset size out of range")
    if keep < 1:
        keep = 1
    if keep > n:
        keep = n
    if code < 0 or code > SNR:
        raise ValueError(f"unknown strategy code {code}")
    for p in range(n_pools):
        if sizes[p] < n:
            raise ValueError("pool smaller than subset size")

    cdef uint64_t* bkey = <uint64_t*> malloc(n * sizeof(uint64_t))
    cdef Py_ssize_t* bidx = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t* kept = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    cdef double* kvar = <double*> malloc(n * sizeof(double))
    if bkey == NULL or bidx == NULL or kept == NULL or kvar == NULL:
        free(bkey); free(bidx); free(kept); free(kvar)
        raise MemoryError()

    cdef Py_ssize_t i, j, filled, pos, best, m, cnt
    cdef uint64_t h, k
    cdef double s, bs, v
    try:
        with nogil:
            for i in range(n_pools):
                h = cell_keys[i]
                filled = 0
                # keep the n smallest (key, index) pairs, sorted ascending
                for j in range(sizes[i]):
                    k = _mix64((h ^ <uint64_t> j) + GOLDEN)
                    if filled == n and not _key_less(k, j, bkey[n - 1], bidx[n - 1]):
                        continue
                    pos = filled if filled < n else n - 1
                    while pos > 0 and _key_less(k, j, bkey[pos - 1], bidx[pos - 1]):
                        bkey[pos] = bkey[pos - 1]
                        bidx[pos] = bidx[pos - 1]
                        pos -= 1
                    bkey[pos] = k
                    bidx[pos] = j
                    if filled < n:
                        filled += 1

                if code == RANDOM:
                    out[i] = true[i, bidx[0]]
                    continue

                _sort_small(bidx, n)
                m = n
                if code == VARFILTER:
                    # stable selection of the `keep` lowest variances
                    for j in range(n):
                        kept[j] = j
                        kvar[j] = var[i, bidx[j]]
                    for j in range(1, n):
                        cnt = kept[j]
                        v = kvar[j]
                        pos = j - 1
                        while pos >= 0 and kvar[pos] > v:
                            kvar[pos + 1] = kvar[pos]
                            kept[pos + 1] = kept[pos]
                            pos -= 1
                        kvar[pos + 1] = v
                        kept[pos + 1] = cnt
                    _sort_small(kept, keep)
                    for j in range(keep):
                        kept[j] = bidx[kept[j]]
                    for j in range(keep):
                        bidx[j] = kept[j]
                    m = keep

                best = bidx[0]
                bs = 0.0
                for j in range(m):
                    pos = bidx[j]
                    if code == ORACLE:
                        s = true[i, pos]
                    elif code == MEAN or code == VARFILTER:
                        s = mean[i, pos]
                    elif code == LCB:
                        s = mean[i, pos] - beta * sqrt(var[i, pos])
                    elif code == UCB:
                        s = mean[i, pos] + beta * sqrt(var[i, pos])
                    else:
                        s = _snr(mean[i, pos], var[i, pos])
                    if j == 0 or s > bs:
                        bs = s
                        best = pos
                out[i] = true[i, best]
    finally:
        free(bkey); free(bidx); free(kept); free(kvar)
    return out_arr
