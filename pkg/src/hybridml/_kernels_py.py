"""Numpy implementation of the aggregation kernels (import-time fallback)."""
import numpy as np


def weighted_mean_rows(rows, weights):
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if weights.shape[0] != rows.shape[0]:
        raise ValueError("weights length does not match row count")
    total = 0.0
    for w in weights:
        total += float(w)
    acc = np.zeros(rows.shape[1], dtype=np.float64)
    for i in range(rows.shape[0]):
        acc += (float(weights[i]) / total) * rows[i]
    return acc


def segment_weighted_mean(stack, seg_weights, fallback, seg_len):
    stack = np.ascontiguousarray(stack, dtype=np.float64)
    seg_weights = np.ascontiguousarray(seg_weights, dtype=np.float64)
    fallback = np.ascontiguousarray(fallback, dtype=np.float64)
    k, width = stack.shape
    n_seg = seg_weights.shape[1]
    if seg_weights.shape[0] != k:
        raise ValueError("seg_weights rows do not match stack rows")
    if width != n_seg * seg_len or fallback.shape[0] != width:
        raise ValueError("stack width must equal segment count * segment length")
    acc = np.zeros(width, dtype=np.float64)
    for s in range(n_seg):
        lo, hi = s * seg_len, (s + 1) * seg_len
        senders = [i for i in range(k) if seg_weights[i, s] > 0.0]
        if not senders:
            acc[lo:hi] = fallback[lo:hi]
            continue
        total = 0.0
        for i in senders:
            total += float(seg_weights[i, s])
        for i in senders:
            acc[lo:hi] += (float(seg_weights[i, s]) / total) * stack[i, lo:hi]
    return acc
