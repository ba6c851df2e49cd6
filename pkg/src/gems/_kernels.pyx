# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sparse kernels. Signatures mirror gems._fallback exactly.

Every reduction runs over CSR entries in stored order, so results do not
depend on how the caller built the pattern beyond that order.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp

cnp.import_array()


def spmm(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
         const floating[:, ::1] weights, const floating[:, :, ::1] x, Py_ssize_t n_rows):
    cdef Py_ssize_t H = x.shape[1], F = x.shape[2]
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((n_rows, H, F), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, h, f, src
    cdef floating w
    with nogil:
        for i in range(n_rows):
            for j in range(indptr[i], indptr[i + 1]):
                src = indices[j]
                for h in range(H):
                    w = weights[j, h]
                    for f in range(F):
                        out[i, h, f] += w * x[src, h, f]
    return out_arr


def sddmm(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
          const floating[:, :, ::1] a, const floating[:, :, ::1] b):
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1, H = a.shape[1], F = a.shape[2]
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((indices.shape[0], H), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, h, f, src
    cdef floating acc
    with nogil:
        for i in range(n_rows):
            for j in range(indptr[i], indptr[i + 1]):
                src = indices[j]
                for h in range(H):
                    acc = 0
                    for f in range(F):
                        acc = acc + a[i, h, f] * b[src, h, f]
                    out[j, h] = acc
    return out_arr


def segment_softmax(const cnp.int64_t[::1] indptr, const floating[:, ::1] logits):
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1, H = logits.shape[1]
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((logits.shape[0], H), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, h, lo, hi
    cdef floating m, s
    with nogil:
        for i in range(n_rows):
            lo = indptr[i]
            hi = indptr[i + 1]
            if hi == lo:
                continue
            for h in range(H):
                m = logits[lo, h]
                for j in range(lo + 1, hi):
                    if logits[j, h] > m:
                        m = logits[j, h]
                s = 0
                for j in range(lo, hi):
                    out[j, h] = exp(logits[j, h] - m)
                    s = s + out[j, h]
                for j in range(lo, hi):
                    out[j, h] = out[j, h] / s
    return out_arr


def segment_softmax_backward(const cnp.int64_t[::1] indptr, const floating[:, ::1] alpha,
                             const floating[:, ::1] grad):
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1, H = alpha.shape[1]
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((alpha.shape[0], H), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, h
    cdef floating dot
    with nogil:
        for i in range(n_rows):
            for h in range(H):
                dot = 0
                for j in range(indptr[i], indptr[i + 1]):
                    dot = dot + alpha[j, h] * grad[j, h]
                for j in range(indptr[i], indptr[i + 1]):
                    out[j, h] = alpha[j, h] * (grad[j, h] - dot)
    return out_arr


def scatter_add_rows(const cnp.int64_t[::1] index, const floating[:, ::1] values, Py_ssize_t n_rows):
    cdef Py_ssize_t n = index.shape[0], D = values.shape[1]
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((n_rows, D), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, d, r
    with nogil:
        for i in range(n):
            r = index[i]
            for d in range(D):
                out[r, d] += values[i, d]
    return out_arr
