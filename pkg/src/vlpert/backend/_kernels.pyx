# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels (NHWC, float64, weights (kh, kw, c_in, c_out)).

The innermost loops run over the contiguous trailing channel axis through
raw pointers, which lets the C compiler vectorize them.
"""

import numpy as np

cimport cython


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   double[::1] b, int stride, int pad):
    cdef Py_ssize_t batch = x.shape[0], h = x.shape[1], wid = x.shape[2], c_in = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], c_out = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (wid + 2 * pad - kw) // stride + 1
    out = np.empty((batch, oh, ow, c_out))
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t n, r, c, o, i, j, ci, ih, iw
    cdef double xv
    cdef double* yp
    cdef const double* wp
    cdef const double* xp
    for n in range(batch):
        for r in range(oh):
            for c in range(ow):
                yp = &y[n, r, c, 0]
                for o in range(c_out):
                    yp[o] = b[o]
                for i in range(kh):
                    ih = r * stride + i - pad
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(kw):
                        iw = c * stride + j - pad
                        if iw < 0 or iw >= wid:
                            continue
                        xp = &x[n, ih, iw, 0]
                        for ci in range(c_in):
                            xv = xp[ci]
                            wp = &w[i, j, ci, 0]
                            for o in range(c_out):
                                yp[o] += xv * wp[o]
    return out


def conv2d_grad_input(double[:, :, :, ::1] gy, double[:, :, :, ::1] w,
                      int stride, int pad, int h, int wid):
    cdef Py_ssize_t batch = gy.shape[0], oh = gy.shape[1], ow = gy.shape[2], c_out = gy.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], c_in = w.shape[2]
    out = np.zeros((batch, h, wid, c_in))
    cdef double[:, :, :, ::1] gx = out
    cdef Py_ssize_t n, r, c, o, i, j, ci, ih, iw
    cdef double acc
    cdef const double* gp
    cdef const double* wp
    cdef double* xp
    for n in range(batch):
        for r in range(oh):
            for c in range(ow):
                gp = &gy[n, r, c, 0]
                for i in range(kh):
                    ih = r * stride + i - pad
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(kw):
                        iw = c * stride + j - pad
                        if iw < 0 or iw >= wid:
                            continue
                        xp = &gx[n, ih, iw, 0]
                        for ci in range(c_in):
                            wp = &w[i, j, ci, 0]
                            acc = 0.0
                            for o in range(c_out):
                                acc += gp[o] * wp[o]
                            xp[ci] += acc
    return out


def conv2d_grad_weights(double[:, :, :, ::1] x, double[:, :, :, ::1] gy,
                        int stride, int pad, int kh, int kw):
    cdef Py_ssize_t batch = x.shape[0], h = x.shape[1], wid = x.shape[2], c_in = x.shape[3]
    cdef Py_ssize_t oh = gy.shape[1], ow = gy.shape[2], c_out = gy.shape[3]
    gw_arr = np.zeros((kh, kw, c_in, c_out))
    gb_arr = np.zeros(c_out)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t n, r, c, o, i, j, ci, ih, iw
    cdef double xv
    cdef const double* gp
    cdef const double* xp
    cdef double* wp
    cdef double* bp = &gb[0]
    for n in range(batch):
        for r in range(oh):
            for c in range(ow):
                gp = &gy[n, r, c, 0]
                for o in range(c_out):
                    bp[o] += gp[o]
                for i in range(kh):
                    ih = r * stride + i - pad
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(kw):
                        iw = c * stride + j - pad
                        if iw < 0 or iw >= wid:
                            continue
                        xp = &x[n, ih, iw, 0]
                        for ci in range(c_in):
                            xv = xp[ci]
                            wp = &gw[i, j, ci, 0]
                            for o in range(c_out):
                                wp[o] += xv * gp[o]
    return gw_arr, gb_arr
