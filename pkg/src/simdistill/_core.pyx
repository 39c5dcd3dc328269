# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementation of the hot kernels.

Semantics match simdistill._core_py function for function; keep the two in
sync. All matrices are C-contiguous float64.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp, log as c_log, sqrt as c_sqrt

NAME = "cython"

ctypedef cnp.int64_t i64


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double aip
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            if aip == 0.0:
                continue
            for j in range(m):
                out[i, j] += aip * b[p, j]
    return out_arr


def affine_fwd(double[:, ::1] x, double[:, ::1] w, double[:, ::1] b):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], m = w.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double xip
    for i in range(n):
        for j in range(m):
            out[i, j] = b[0, j]
    for i in range(n):
        for p in range(k):
            xip = x[i, p]
            if xip == 0.0:
                continue
            for j in range(m):
                out[i, j] += xip * w[p, j]
    return out_arr


def relu_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            out[i, j] = x[i, j] if x[i, j] > 0.0 else 0.0
    return out_arr


def relu_bwd(double[:, ::1] x, double[:, ::1] gout):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            out[i, j] = gout[i, j] if x[i, j] > 0.0 else 0.0
    return out_arr


def rownorm_fwd(double[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    norms_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] norms = norms_arr
    cdef Py_ssize_t i, j
    cdef double acc, denom
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += x[i, j] * x[i, j]
        norms[i] = c_sqrt(acc)
        denom = norms[i] if norms[i] > eps else eps
        for j in range(m):
            out[i, j] = x[i, j] / denom
    return out_arr, norms_arr


def rownorm_bwd(double[:, ::1] y, double[::1] norms, double eps, double[:, ::1] gout):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] gx = out_arr
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        if norms[i] >= eps:
            dot = 0.0
            for j in range(m):
                dot += gout[i, j] * y[i, j]
            for j in range(m):
                gx[i, j] = (gout[i, j] - dot * y[i, j]) / norms[i]
        else:
            for j in range(m):
                gx[i, j] = gout[i, j] / eps
    return out_arr


def gram_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    out_arr = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(n):
        for j in range(i, n):
            acc = 0.0
            for p in range(d):
                acc += x[i, p] * x[j, p]
            out[i, j] = acc
            out[j, i] = acc
    return out_arr


def gram_bwd(double[:, ::1] x, double[:, ::1] gout):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] gx = out_arr
    cdef Py_ssize_t i, j, p
    cdef double coeff
    for i in range(n):
        for j in range(n):
            coeff = gout[i, j] + gout[j, i]
            if coeff == 0.0:
                continue
            for p in range(d):
                gx[i, p] += coeff * x[j, p]
    return out_arr


def pdist2_fwd(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double acc, diff
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(d):
                diff = a[i, p] - b[j, p]
                acc += diff * diff
            out[i, j] = acc if acc > 0.0 else 0.0
    return out_arr


def pdist2_bwd(double[:, ::1] a, double[:, ::1] b, double[:, ::1] gout):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    ga_arr = np.zeros((n, d), dtype=np.float64)
    gb_arr = np.zeros((m, d), dtype=np.float64)
    cdef double[:, ::1] ga = ga_arr
    cdef double[:, ::1] gb = gb_arr
    cdef Py_ssize_t i, j, p
    cdef double g2
    for i in range(n):
        for j in range(m):
            g2 = 2.0 * gout[i, j]
            if g2 == 0.0:
                continue
            for p in range(d):
                ga[i, p] += g2 * (a[i, p] - b[j, p])
                gb[j, p] += g2 * (b[j, p] - a[i, p])
    return ga_arr, gb_arr


def softmax_ce_fwd(double[:, ::1] logits, i64[::1] labels):
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1]
    probs_arr = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] probs = probs_arr
    cdef Py_ssize_t i, j
    cdef double mx, total, loss = 0.0
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > mx:
                mx = logits[i, j]
        total = 0.0
        for j in range(c):
            probs[i, j] = c_exp(logits[i, j] - mx)
            total += probs[i, j]
        for j in range(c):
            probs[i, j] /= total
        loss -= (logits[i, labels[i]] - mx) - c_log(total)
    return loss / n, probs_arr


def softmax_ce_bwd(double[:, ::1] probs, i64[::1] labels, double gout):
    cdef Py_ssize_t n = probs.shape[0], c = probs.shape[1]
    out_arr = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] g = out_arr
    cdef Py_ssize_t i, j
    cdef double coeff = gout / n
    for i in range(n):
        for j in range(c):
            g[i, j] = probs[i, j] * coeff
        g[i, labels[i]] -= coeff
    return out_arr


def frobdiff_fwd(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc = 0.0, diff
    for i in range(n):
        for j in range(m):
            diff = a[i, j] - b[i, j]
            acc += diff * diff
    return c_sqrt(acc)


def row_extremum_fwd(double[:, ::1] x, unsigned char[:, ::1] mask, bint use_max):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    vals_arr = np.zeros((n, 1), dtype=np.float64)
    idx_arr = np.full(n, -1, dtype=np.int64)
    cdef double[:, ::1] vals = vals_arr
    cdef i64[::1] idx = idx_arr
    cdef Py_ssize_t i, j
    cdef double best
    cdef Py_ssize_t best_j
    for i in range(n):
        best_j = -1
        best = 0.0
        for j in range(m):
            if not mask[i, j]:
                continue
            if best_j < 0 or (x[i, j] > best if use_max else x[i, j] < best):
                best = x[i, j]
                best_j = j
        if best_j >= 0:
            vals[i, 0] = best
            idx[i] = best_j
    return vals_arr, idx_arr
