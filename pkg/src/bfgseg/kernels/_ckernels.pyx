# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``.

Loop order and tie rules mirror the numpy versions exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def knn(double[:, ::1] coords, Py_ssize_t k):
    cdef Py_ssize_t n = coords.shape[0], dim = coords.shape[1]
    cdef Py_ssize_t i, j, c, p
    cdef double acc, diff
    out = np.empty((n, k), dtype=np.int64)
    cdef long long[:, ::1] o = out
    cdef double[::1] bd = np.empty(k)
    cdef long long[::1] bi = np.empty(k, dtype=np.int64)
    for i in range(n):
        for p in range(k):
            bd[p] = INFINITY
            bi[p] = -1
        for j in range(n):
            if j == i:
                continue
            acc = 0.0
            for c in range(dim):
                diff = coords[i, c] - coords[j, c]
                acc = acc + diff * diff
            if bi[k - 1] >= 0 and not (acc < bd[k - 1]):
                continue
            p = k - 1
            while p > 0 and (bi[p - 1] < 0 or bd[p - 1] > acc):
                bd[p] = bd[p - 1]
                bi[p] = bi[p - 1]
                p -= 1
            bd[p] = acc
            bi[p] = j
        for p in range(k):
            o[i, p] = bi[p]
    return out


def fps(double[:, ::1] points, Py_ssize_t n_samples, Py_ssize_t first):
    cdef Py_ssize_t m = points.shape[0], dim = points.shape[1]
    cdef Py_ssize_t s, i, c, nxt
    cdef double acc, diff, best
    out = np.empty(n_samples, dtype=np.int64)
    cdef long long[::1] o = out
    cdef double[::1] mind = np.empty(m)
    for i in range(m):
        acc = 0.0
        for c in range(dim):
            diff = points[i, c] - points[first, c]
            acc = acc + diff * diff
        mind[i] = acc
    mind[first] = -1.0
    o[0] = first
    for s in range(1, n_samples):
        nxt = 0
        best = mind[0]
        for i in range(1, m):
            if mind[i] > best:
                best = mind[i]
                nxt = i
        o[s] = nxt
        mind[nxt] = -1.0
        for i in range(m):
            if mind[i] < 0.0:
                continue
            acc = 0.0
            for c in range(dim):
                diff = points[i, c] - points[nxt, c]
                acc = acc + diff * diff
            if acc < mind[i]:
                mind[i] = acc
    return out


def nearest_seed(double[:, ::1] points, double[:, ::1] seeds):
    cdef Py_ssize_t m = points.shape[0], n_seeds = seeds.shape[0], dim = points.shape[1]
    cdef Py_ssize_t i, k, c, arg
    cdef double acc, diff, best
    out = np.empty(m, dtype=np.int64)
    cdef long long[::1] o = out
    for i in range(m):
        arg = 0
        best = INFINITY
        for k in range(n_seeds):
            acc = 0.0
            for c in range(dim):
                diff = points[i, c] - seeds[k, c]
                acc = acc + diff * diff
            if acc < best:
                best = acc
                arg = k
        o[i] = arg
    return out


def scatter_add_rows(double[:, ::1] out, long long[::1] idx, double[:, ::1] src):
    cdef Py_ssize_t n = idx.shape[0], dim = src.shape[1]
    cdef Py_ssize_t r, c, t
    for r in range(n):
        t = idx[r]
        for c in range(dim):
            out[t, c] += src[r, c]
