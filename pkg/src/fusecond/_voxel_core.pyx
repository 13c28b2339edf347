# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled voxel vote kernel. Same contract as _voxel_core_py."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def knn_vote_counts(positions, selected, int k):
    """For each voxel, the number of selected voxels among its k nearest
    neighbors (self excluded, squared Euclidean distance, ties broken by
    ascending voxel index)."""
    cdef cnp.int64_t[:, ::1] pos = np.ascontiguousarray(positions, dtype=np.int64)
    cdef cnp.uint8_t[::1] sel = np.ascontiguousarray(selected, dtype=np.uint8)
    cdef Py_ssize_t n = pos.shape[0]
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = out
    # per-voxel running list of the k best (distance, index) pairs,
    # kept sorted ascending; ties resolve to the smaller index because
    # candidates arrive in index order and equal distances do not displace
    best_d = np.empty(k, dtype=np.int64)
    best_i = np.empty(k, dtype=np.int64)
    cdef cnp.int64_t[::1] bd = best_d
    cdef cnp.int64_t[::1] bi = best_i
    cdef Py_ssize_t i, j, m, slot
    cdef cnp.int64_t dx, dy, dz, d2
    cdef Py_ssize_t filled
    cdef cnp.int64_t c
    for i in range(n):
        filled = 0
        for j in range(n):
            if j == i:
                continue
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if filled == k and d2 >= bd[k - 1]:
                continue
            # binary insertion position: first slot with distance > d2
            # (strictly greater keeps earlier equal-distance indices first)
            slot = filled
            while slot > 0 and bd[slot - 1] > d2:
                slot -= 1
            if filled < k:
                filled += 1
            for m in range(filled - 1, slot, -1):
                bd[m] = bd[m - 1]
                bi[m] = bi[m - 1]
            bd[slot] = d2
            bi[slot] = j
        c = 0
        for m in range(filled):
            if sel[bi[m]]:
                c += 1
        counts[i] = c
    return out
