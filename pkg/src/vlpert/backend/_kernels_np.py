"""NumPy fallback for the convolution kernels.

Same contracts as the compiled extension: NHWC layout, float64, weights
shaped (kh, kw, c_in, c_out). Implemented as one matmul per kernel offset,
which keeps every reduction a BLAS call instead of a Python loop over
output pixels.
"""

from __future__ import annotations

import numpy as np


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride: int, pad: int):
    batch, h, wid, c_in = x.shape
    kh, kw, _, c_out = w.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(wid, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    y = np.zeros((batch, oh, ow, c_out))
    y += b
    for i in range(kh):
        for j in range(kw):
            window = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
            y += (window.reshape(-1, c_in) @ w[i, j]).reshape(batch, oh, ow, c_out)
    return y


def conv2d_grad_input(gy, w, stride: int, pad: int, h: int, wid: int):
    batch, oh, ow, c_out = gy.shape
    kh, kw, c_in, _ = w.shape
    gxp = np.zeros((batch, h + 2 * pad, wid + 2 * pad, c_in))
    gy_flat = gy.reshape(-1, c_out)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += (
                gy_flat @ w[i, j].T
            ).reshape(batch, oh, ow, c_in)
    return gxp[:, pad : pad + h, pad : pad + wid, :]


def conv2d_grad_weights(x, gy, stride: int, pad: int, kh: int, kw: int):
    batch, h, wid, c_in = x.shape
    _, oh, ow, c_out = gy.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    gw = np.empty((kh, kw, c_in, c_out))
    gy_flat = gy.reshape(-1, c_out)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
            gw[i, j] = window.reshape(-1, c_in).T @ gy_flat
    gb = gy.sum(axis=(0, 1, 2))
    return gw, gb
