# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled point-sampling kernels.

Semantics mirror the NumPy fallback exactly: float64 accumulation in
x, y, z term order and lowest-index tie breaking.  The build disables
FP contraction so both backends round identically.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def fps(const double[:, ::1] coords, Py_ssize_t m, Py_ssize_t start):
    cdef Py_ssize_t n = coords.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] selected = np.empty(m, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] min_d2 = np.full(n, np.inf)
    cdef double[::1] md = min_d2
    cdef cnp.int64_t[::1] sel = selected
    cdef Py_ssize_t i, j, last, best_j
    cdef double cx, cy, cz, dx, dy, dz, d2, best

    last = start
    sel[0] = start
    for i in range(1, m):
        cx = coords[last, 0]
        cy = coords[last, 1]
        cz = coords[last, 2]
        best = -1.0
        best_j = 0
        for j in range(n):
            dx = coords[j, 0] - cx
            dy = coords[j, 1] - cy
            dz = coords[j, 2] - cz
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < md[j]:
                md[j] = d2
            if md[j] > best:
                best = md[j]
                best_j = j
        last = best_j
        sel[i] = last
    return selected


def ball_query(const double[:, ::1] centers, const double[:, ::1] coords,
               double radius, Py_ssize_t nsample):
    cdef Py_ssize_t m = centers.shape[0]
    cdef Py_ssize_t n = coords.shape[0]
    cdef double r2 = radius * radius
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out = np.empty((m, nsample), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    cdef Py_ssize_t i, j, hits, nearest
    cdef double cx, cy, cz, dx, dy, dz, d2, nearest_d2

    for j in range(m):
        cx = centers[j, 0]
        cy = centers[j, 1]
        cz = centers[j, 2]
        hits = 0
        nearest = 0
        nearest_d2 = np.inf
        for i in range(n):
            dx = coords[i, 0] - cx
            dy = coords[i, 1] - cy
            dz = coords[i, 2] - cz
            d2 = dx * dx + dy * dy + dz * dz
            if d2 <= r2:
                o[j, hits] = i
                hits += 1
                if hits == nsample:
                    break
            elif hits == 0 and d2 < nearest_d2:
                nearest_d2 = d2
                nearest = i
        if hits == 0:
            for i in range(nsample):
                o[j, i] = nearest
        else:
            for i in range(hits, nsample):
                o[j, i] = o[j, 0]
    return out


def three_nn(const double[:, ::1] query, const double[:, ::1] ref, Py_ssize_t k):
    cdef Py_ssize_t q = query.shape[0]
    cdef Py_ssize_t m = ref.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] idx_out = np.empty((q, k), dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d2_out = np.empty((q, k), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] io_ = idx_out
    cdef double[:, ::1] do_ = d2_out
    cdef Py_ssize_t i, j, p, t, filled
    cdef double qx, qy, qz, dx, dy, dz, d2

    for i in range(q):
        qx = query[i, 0]
        qy = query[i, 1]
        qz = query[i, 2]
        filled = 0
        for j in range(m):
            dx = ref[j, 0] - qx
            dy = ref[j, 1] - qy
            dz = ref[j, 2] - qz
            d2 = dx * dx + dy * dy + dz * dz
            if filled < k:
                p = filled
                while p > 0 and do_[i, p - 1] > d2:
                    do_[i, p] = do_[i, p - 1]
                    io_[i, p] = io_[i, p - 1]
                    p -= 1
                do_[i, p] = d2
                io_[i, p] = j
                filled += 1
            elif d2 < do_[i, k - 1]:
                p = k - 1
                while p > 0 and do_[i, p - 1] > d2:
                    do_[i, p] = do_[i, p - 1]
                    io_[i, p] = io_[i, p - 1]
                    p -= 1
                do_[i, p] = d2
                io_[i, p] = j
    return idx_out, d2_out
