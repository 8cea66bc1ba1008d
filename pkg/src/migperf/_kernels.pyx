# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops in ``_kernels_py``.

Slice masks are 64-bit, so devices are limited to 63 compute slices here;
``migperf.kernels`` routes larger devices to the Python versions.
"""

from libc.math cimport floor, INFINITY
from libc.stdlib cimport malloc, free

import numpy as np

ctypedef unsigned long long u64


cdef inline u64 _mask(int start, int size):
    return ((<u64>1 << size) - 1) << start


def search_placement(sizes, starts, same_as_prev, int total):
    cdef int n = len(sizes)
    if n == 0:
        return []
    cdef int *sz = <int *>malloc(n * sizeof(int))
    cdef int *same = <int *>malloc(n * sizeof(int))
    cdef int *nst = <int *>malloc(n * sizeof(int))
    cdef int *chosen = <int *>malloc(n * sizeof(int))
    cdef int *cursor = <int *>malloc(n * sizeof(int))
    cdef u64 *masks = <u64 *>malloc((n + 1) * sizeof(u64))
    cdef int *st = NULL
    cdef int i, j, s, k, width = 0
    cdef bint found
    cdef u64 m
    try:
        for i in range(n):
            if len(starts[i]) > width:
                width = len(starts[i])
        st = <int *>malloc((n * width + 1) * sizeof(int))
        for i in range(n):
            sz[i] = sizes[i]
            same[i] = 1 if same_as_prev[i] else 0
            nst[i] = len(starts[i])
            for k in range(nst[i]):
                st[i * width + k] = starts[i][k]
        masks[0] = 0
        cursor[0] = 0
        i = 0
        while True:
            if i == n:
                return [chosen[k] for k in range(n)]
            if i < 0:
                return None
            found = False
            j = cursor[i]
            while j < nst[i]:
                s = st[i * width + j]
                j += 1
                if s + sz[i] > total:
                    continue
                if same[i] and i > 0 and s <= chosen[i - 1]:
                    continue
                m = _mask(s, sz[i])
                if masks[i] & m:
                    continue
                chosen[i] = s
                masks[i + 1] = masks[i] | m
                found = True
                break
            cursor[i] = j
            if found:
                i += 1
                if i < n:
                    cursor[i] = 0
            else:
                i -= 1
    finally:
        free(sz); free(same); free(nst); free(chosen); free(cursor); free(masks)
        if st != NULL:
            free(st)


cdef void _place(int p, int min_start, u64 occupied, int n, int width,
                 int *sz, int *nst, int *st, int *maxc, int *counts,
                 int total, set out):
    cdef int q, k, s, lo
    cdef u64 m
    out.add(tuple([counts[k] for k in range(n)]))
    for q in range(p, n):
        if counts[q] >= maxc[q]:
            continue
        lo = min_start if q == p else 0
        for k in range(nst[q]):
            s = st[q * width + k]
            if s < lo or s + sz[q] > total:
                continue
            m = _mask(s, sz[q])
            if occupied & m:
                continue
            counts[q] += 1
            _place(q, s + 1, occupied | m, n, width, sz, nst, st, maxc,
                   counts, total, out)
            counts[q] -= 1


def enumerate_configs(sizes, starts, max_counts, int total):
    cdef int n = len(sizes)
    cdef set out = set()
    cdef int i, k, width = 1
    for i in range(n):
        if len(starts[i]) > width:
            width = len(starts[i])
    cdef int *sz = <int *>malloc((n + 1) * sizeof(int))
    cdef int *nst = <int *>malloc((n + 1) * sizeof(int))
    cdef int *maxc = <int *>malloc((n + 1) * sizeof(int))
    cdef int *counts = <int *>malloc((n + 1) * sizeof(int))
    cdef int *st = <int *>malloc((n * width + 1) * sizeof(int))
    try:
        for i in range(n):
            sz[i] = sizes[i]
            nst[i] = len(starts[i])
            maxc[i] = max_counts[i]
            counts[i] = 0
            for k in range(nst[i]):
                st[i * width + k] = starts[i][k]
        _place(0, 0, 0, n, width, sz, nst, st, maxc, counts, total, out)
        return out
    finally:
        free(sz); free(nst); free(maxc); free(counts); free(st)


def fifo_completions(arrivals, services):
    cdef Py_ssize_t n = len(arrivals), i
    cdef double[::1] a = _as_doubles(arrivals)
    cdef double[::1] s = _as_doubles(services)
    out = [0.0] * n
    cdef double free_at = -INFINITY
    cdef double begin
    for i in range(n):
        begin = a[i] if a[i] > free_at else free_at
        free_at = begin + s[i]
        out[i] = free_at
    return out


def busy_fractions(busy_starts, busy_ends, double interval, Py_ssize_t n_bins):
    cdef double[::1] starts = _as_doubles(busy_starts)
    cdef double[::1] ends = _as_doubles(busy_ends)
    cdef Py_ssize_t n = starts.shape[0], i, k
    cdef double a, b, lo, hi, overlap, frac
    cdef double *acc = <double *>malloc((n_bins + 1) * sizeof(double))
    try:
        for k in range(n_bins):
            acc[k] = 0.0
        for i in range(n):
            a = starts[i]
            b = ends[i]
            if b <= a:
                continue
            k = <Py_ssize_t>floor(a / interval)
            if k < 0:
                k = 0
            while k < n_bins:
                lo = k * interval
                hi = lo + interval
                if lo >= b:
                    break
                overlap = (b if b < hi else hi) - (a if a > lo else lo)
                if overlap > 0:
                    acc[k] += overlap
                k += 1
        out = [0.0] * n_bins
        for k in range(n_bins):
            frac = acc[k] / interval
            out[k] = 1.0 if frac > 1.0 else frac
        return out
    finally:
        free(acc)


cdef double[::1] _as_doubles(values):
    return np.ascontiguousarray(values, dtype=np.float64)
