# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: patch gather (im2col) and its scatter-add adjoint.

These two loops sit under every convolution forward/backward in the model
and dominate training time; see benchmarks/bench_kernels.py for numbers
against the numpy fallback.
"""

import numpy as np

cimport cython
from libc.string cimport memcpy

ctypedef fused real:
    float
    double


def im2col(x, int k, int stride, int pad):
    x = np.ascontiguousarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return _im2col(x, k, stride, pad)


def col2im(cols, int h, int w, int k, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    if cols.dtype not in (np.float32, np.float64):
        cols = cols.astype(np.float64)
    return _col2im(cols, h, w, k, stride, pad)


@cython.boundscheck(False)
@cython.wraparound(False)
def _im2col(real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n_img = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    out_arr = np.zeros((n_img, c_in * k * k, oh * ow),
                       dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, ki, kj, i, j, ih, iw, row, j0, j1
    for n in range(n_img):
        for c in range(c_in):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    if stride == 1:
                        # source run x[.., j0+kj-pad : j1+kj-pad] is contiguous
                        j0 = pad - kj if pad - kj > 0 else 0
                        j1 = w + pad - kj if w + pad - kj < ow else ow
                        if j1 <= j0:
                            continue
                        for i in range(oh):
                            ih = i + ki - pad
                            if ih < 0 or ih >= h:
                                continue
                            memcpy(&out[n, row, i * ow + j0],
                                   &x[n, c, ih, j0 + kj - pad],
                                   (j1 - j0) * sizeof(real))
                    else:
                        for i in range(oh):
                            ih = i * stride + ki - pad
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(ow):
                                iw = j * stride + kj - pad
                                if 0 <= iw < w:
                                    out[n, row, i * ow + j] = x[n, c, ih, iw]
    return out_arr


@cython.boundscheck(False)
@cython.wraparound(False)
def _col2im(real[:, :, ::1] cols, int h, int w, int k, int stride, int pad):
    cdef Py_ssize_t n_img = cols.shape[0]
    cdef Py_ssize_t c_in = cols.shape[1] // (k * k)
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    out_arr = np.zeros((n_img, c_in, h, w),
                       dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, ki, kj, i, j, ih, iw, row
    for n in range(n_img):
        for c in range(c_in):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    for i in range(oh):
                        ih = i * stride + ki - pad
                        if ih < 0 or ih >= h:
                            continue
                        for j in range(ow):
                            iw = j * stride + kj - pad
                            if 0 <= iw < w:
                                out[n, c, ih, iw] += cols[n, row, i * ow + j]
    return out_arr
