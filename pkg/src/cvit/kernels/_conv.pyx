# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-convolution kernels (owner-computes, OpenMP across images/channels).

Inner loops run over contiguous output/input rows with bounds hoisted out,
so the C compiler can vectorize them. Every output element is accumulated
by exactly one thread in a fixed order: results are bit-reproducible for
any thread count. Layouts match cvit.kernels.pure.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

NAME = "compiled"

ctypedef fused floating:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t k, int pad, int stride) noexcept nogil:
    # smallest i with i*stride + k - pad >= 0
    cdef Py_ssize_t num = pad - k
    if num <= 0:
        return 0
    return (num + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t k, int pad, int stride, Py_ssize_t n, Py_ssize_t n_out) noexcept nogil:
    # one past the largest i with i*stride + k - pad < n
    cdef Py_ssize_t top = (n - 1 + pad - k) // stride + 1
    if top > n_out:
        return n_out
    return top


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t b_n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - k) // stride + 1
    out_np = np.zeros((b_n, co, ho, wo), dtype=np.asarray(x).dtype)
    cdef floating[:, :, :, ::1] y = out_np
    cdef Py_ssize_t t, b, o, c, i, j, ki, kj, ii, off
    cdef Py_ssize_t ilo, ihi, jlo, jhi
    cdef floating wv
    for t in prange(b_n * co, nogil=True, schedule="static"):
        b = t // co
        o = t % co
        for c in range(ci):
            for ki in range(k):
                ilo = _lo(ki, pad, stride)
                ihi = _hi(ki, pad, stride, h, ho)
                for kj in range(k):
                    wv = w[o, c, ki, kj]
                    jlo = _lo(kj, pad, stride)
                    jhi = _hi(kj, pad, stride, wd, wo)
                    off = kj - pad
                    for i in range(ilo, ihi):
                        ii = i * stride + ki - pad
                        for j in range(jlo, jhi):
                            y[b, o, i, j] += wv * x[b, c, ii, j * stride + off]
    return out_np


def conv2d_grad_input(floating[:, :, :, ::1] dy, floating[:, :, :, ::1] w,
                      int stride, int pad, Py_ssize_t h, Py_ssize_t w_in):
    cdef Py_ssize_t b_n = dy.shape[0], co = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    cdef Py_ssize_t ci = w.shape[1], k = w.shape[2]
    out_np = np.zeros((b_n, ci, h, w_in), dtype=np.asarray(dy).dtype)
    cdef floating[:, :, :, ::1] dx = out_np
    cdef Py_ssize_t t, b, c, o, i, j, ki, kj, ii, off
    cdef Py_ssize_t ilo, ihi, jlo, jhi
    cdef floating wv
    for t in prange(b_n * ci, nogil=True, schedule="static"):
        b = t // ci
        c = t % ci
        for o in range(co):
            for ki in range(k):
                ilo = _lo(ki, pad, stride)
                ihi = _hi(ki, pad, stride, h, ho)
                for kj in range(k):
                    wv = w[o, c, ki, kj]
                    jlo = _lo(kj, pad, stride)
                    jhi = _hi(kj, pad, stride, w_in, wo)
                    off = kj - pad
                    for i in range(ilo, ihi):
                        ii = i * stride + ki - pad
                        for j in range(jlo, jhi):
                            dx[b, c, ii, j * stride + off] += wv * dy[b, o, i, j]
    return out_np


def conv2d_grad_weight(floating[:, :, :, ::1] x, floating[:, :, :, ::1] dy,
                       Py_ssize_t k, int stride, int pad):
    cdef Py_ssize_t b_n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    out_np = np.zeros((co, ci, k, k), dtype=np.asarray(x).dtype)
    cdef floating[:, :, :, ::1] dw = out_np
    cdef Py_ssize_t t, o, c, ki, kj, b, i, j, ii, off
    cdef Py_ssize_t ilo, ihi, jlo, jhi
    cdef floating acc
    for t in prange(co * ci, nogil=True, schedule="static"):
        o = t // ci
        c = t % ci
        for ki in range(k):
            ilo = _lo(ki, pad, stride)
            ihi = _hi(ki, pad, stride, h, ho)
            for kj in range(k):
                jlo = _lo(kj, pad, stride)
                jhi = _hi(kj, pad, stride, wd, wo)
                off = kj - pad
                acc = 0
                for b in range(b_n):
                    for i in range(ilo, ihi):
                        ii = i * stride + ki - pad
                        for j in range(jlo, jhi):
                            acc = acc + x[b, c, ii, j * stride + off] * dy[b, o, i, j]
                dw[o, c, ki, kj] = acc
    return out_np
