# cython: language_level=3
"""Compiled aggregation kernels.

Every routine accumulates contributions strictly in row order, as
``acc += (w_i / total) * x_i`` with ``total`` summed left to right, so the
output is bit-identical to :mod:`hybridml._kernels_py`.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def weighted_mean_rows(const double[:, ::1] rows, const double[::1] weights):
    cdef Py_ssize_t k = rows.shape[0]
    cdef Py_ssize_t n = rows.shape[1]
    cdef Py_ssize_t i, j
    cdef double total = 0.0
    cdef double wn
    if weights.shape[0] != k:
        raise ValueError("weights length does not match row count")
    for i in range(k):
        total += weights[i]
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] acc = out
    with nogil:
        for i in range(k):
            wn = weights[i] / total
            for j in range(n):
                acc[j] += wn * rows[i, j]
    return out


def segment_weighted_mean(
    const double[:, ::1] stack,
    const double[:, ::1] seg_weights,
    const double[::1] fallback,
    Py_ssize_t seg_len,
):
    cdef Py_ssize_t k = stack.shape[0]
    cdef Py_ssize_t width = stack.shape[1]
    cdef Py_ssize_t n_seg = seg_weights.shape[1]
    cdef Py_ssize_t i, s, j, lo, hi
    cdef double total, wn, w
    if seg_weights.shape[0] != k:
        raise ValueError("seg_weights rows do not match stack rows")
    if width != n_seg * seg_len or fallback.shape[0] != width:
        raise ValueError("stack width must equal segment count * segment length")
    out = np.zeros(width, dtype=np.float64)
    cdef double[::1] acc = out
    with nogil:
        for s in range(n_seg):
            lo = s * seg_len
            hi = lo + seg_len
            total = 0.0
            for i in range(k):
                w = seg_weights[i, s]
                if w > 0.0:
                    total += w
            if total == 0.0:
                for j in range(lo, hi):
                    acc[j] = fallback[j]
                continue
            for i in range(k):
                w = seg_weights[i, s]
                if w > 0.0:
                    wn = w / total
                    for j in range(lo, hi):
                        acc[j] += wn * stack[i, j]
    return out
