# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def furthest_sampling(coords, Py_ssize_t k, Py_ssize_t start):
    cdef double[:, ::1] c = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out_arr = np.empty(k, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef double[::1] mind = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, s, last = start, best
    cdef double d, dx, dy, dz, bestd
    out[0] = start
    for i in range(n):
        dx = c[i, 0] - c[last, 0]
        dy = c[i, 1] - c[last, 1]
        dz = c[i, 2] - c[last, 2]
        mind[i] = dx * dx + dy * dy + dz * dz
    for s in range(1, k):
        best = 0
        bestd = -1.0
        # strict > keeps the lowest index on ties
        for i in range(n):
            if mind[i] > bestd:
                bestd = mind[i]
                best = i
        out[s] = best
        last = best
        for i in range(n):
            dx = c[i, 0] - c[last, 0]
            dy = c[i, 1] - c[last, 1]
            dz = c[i, 2] - c[last, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
    return out_arr


def group_points(idx, dims, Py_ssize_t max_points):
    cdef cnp.int64_t[:, ::1] ix = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t n = ix.shape[0]
    cdef cnp.int64_t gx = int(dims[0]), gy = int(dims[1])
    cdef cnp.ndarray[cnp.int64_t, ndim=1] keys_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] keys = keys_arr
    cdef Py_ssize_t p
    for p in range(n):
        keys[p] = ix[p, 2] * (gx * gy) + ix[p, 1] * gx + ix[p, 0]
    cdef cnp.int64_t[::1] order = np.argsort(keys_arr, kind="stable").astype(np.int64)

    # first pass: count distinct voxels
    cdef Py_ssize_t n_vox = 0
    cdef cnp.int64_t prev = -1
    for p in range(n):
        if p == 0 or keys[order[p]] != prev:
            n_vox += 1
            prev = keys[order[p]]

    coords_arr = np.empty((n_vox, 3), dtype=np.int64)
    table_arr = np.full((n_vox, max_points), -1, dtype=np.int64)
    counts_arr = np.zeros(n_vox, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] coords = coords_arr
    cdef cnp.int64_t[:, ::1] table = table_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef Py_ssize_t v = -1, src
    prev = -1
    for p in range(n):
        src = order[p]
        if p == 0 or keys[src] != prev:
            v += 1
            prev = keys[src]
            coords[v, 0] = ix[src, 0]
            coords[v, 1] = ix[src, 1]
            coords[v, 2] = ix[src, 2]
        if counts[v] < max_points:
            table[v, counts[v]] = src
            counts[v] += 1
    return coords_arr, table_arr, counts_arr
