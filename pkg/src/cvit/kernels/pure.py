"""Numpy fallback convolution kernels (im2col + BLAS matmul).

All three entry points take/return C-contiguous float32 or float64 arrays
with conv layout: inputs (B, C_in, H, W), weights (C_out, C_in, k, k),
outputs (B, C_out, H_out, W_out). Cross-correlation semantics, zero padding.
"""

import numpy as np

NAME = "pure"


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad):
    # (B, C, H, W) -> (B, C*k*k, Ho*Wo); 9 strided slice copies for a 3x3 kernel
    b, c, h, w = x.shape
    ho = _out_extent(h, k, stride, pad)
    wo = _out_extent(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = x[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
    return cols.reshape(b, c * k * k, ho * wo)


def conv2d_forward(x, w, stride, pad):
    b = x.shape[0]
    co, _, k, _ = w.shape
    ho = _out_extent(x.shape[2], k, stride, pad)
    wo = _out_extent(x.shape[3], k, stride, pad)
    cols = _im2col(x, k, stride, pad)
    out = np.matmul(w.reshape(co, -1), cols)
    return np.ascontiguousarray(out.reshape(b, co, ho, wo))


def conv2d_grad_input(dy, w, stride, pad, h, w_in):
    b, co, ho, wo = dy.shape
    _, ci, k, _ = w.shape
    dcols = np.matmul(w.reshape(co, -1).T, dy.reshape(b, co, ho * wo))
    dcols = dcols.reshape(b, ci, k, k, ho, wo)
    dxp = np.zeros((b, ci, h + 2 * pad, w_in + 2 * pad), dtype=dy.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[:, :, ki, kj]
    if pad:
        dxp = dxp[:, :, pad : pad + h, pad : pad + w_in]
    return np.ascontiguousarray(dxp)


def conv2d_grad_weight(x, dy, k, stride, pad):
    b, co, ho, wo = dy.shape
    ci = x.shape[1]
    cols = _im2col(x, k, stride, pad)
    # batched GEMM then reduce over the batch (faster than one big tensordot)
    dw = np.matmul(dy.reshape(b, co, ho * wo), cols.transpose(0, 2, 1)).sum(axis=0)
    return np.ascontiguousarray(dw.reshape(co, ci, k, k))
