# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im and max-pool kernels.

Column layout is (N, Ho*Wo, C*k*k): one row per output position, so the
conv GEMM is a tall-skinny product.  Semantics and accumulation order match
``affnet._fallback`` exactly; padding is implicit zeros.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n_batch = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kk = chans * k * k
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n_batch, ho * wo, kk), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t n, c, ki, kj, oy, ox, col, iy, ix0, p
    cdef floating* dst
    with nogil:
        for n in range(n_batch):
            for oy in range(ho):
                for ox in range(wo):
                    p = oy * wo + ox
                    ix0 = ox * stride - pad
                    dst = &cols[n, p, 0]
                    col = 0
                    for c in range(chans):
                        for ki in range(k):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                for kj in range(k):
                                    dst[col + kj] = 0
                            elif ix0 >= 0 and ix0 + k <= w:
                                for kj in range(k):
                                    dst[col + kj] = x[n, c, iy, ix0 + kj]
                            else:
                                for kj in range(k):
                                    if ix0 + kj < 0 or ix0 + kj >= w:
                                        dst[col + kj] = 0
                                    else:
                                        dst[col + kj] = x[n, c, iy, ix0 + kj]
                            col += k
    return out


def col2im(floating[:, :, ::1] cols, int chans, int h, int w,
           int k, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n_batch = cols.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n_batch, chans, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, c, ki, kj, oy, ox, col, iy, ix, ix0
    cdef floating* src
    # row-major sweep over output positions: each dx element receives its
    # terms in descending (ki, kj) order, mirrored by the fallback
    with nogil:
        for n in range(n_batch):
            for oy in range(ho):
                for ox in range(wo):
                    src = &cols[n, oy * wo + ox, 0]
                    ix0 = ox * stride - pad
                    col = 0
                    for c in range(chans):
                        for ki in range(k):
                            iy = oy * stride + ki - pad
                            if iy >= 0 and iy < h:
                                for kj in range(k):
                                    ix = ix0 + kj
                                    if ix >= 0 and ix < w:
                                        dx[n, c, iy, ix] += src[col + kj]
                            col += k
    return out


def maxpool_forward(floating[:, :, :, ::1] x, int k, int stride, int ho, int wo):
    cdef Py_ssize_t n_batch = x.shape[0], chans = x.shape[1], w = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n_batch, chans, ho, wo), dtype=dtype)
    arg_arr = np.empty((n_batch, chans, ho, wo), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, c, oy, ox, ki, kj, iy, ix, best_idx
    cdef floating best, v
    with nogil:
        for n in range(n_batch):
            for c in range(chans):
                for oy in range(ho):
                    for ox in range(wo):
                        iy = oy * stride
                        ix = ox * stride
                        best = x[n, c, iy, ix]
                        best_idx = iy * w + ix
                        for ki in range(k):
                            for kj in range(k):
                                v = x[n, c, iy + ki, ix + kj]
                                if v > best:
                                    best = v
                                    best_idx = (iy + ki) * w + ix + kj
                        out[n, c, oy, ox] = best
                        arg[n, c, oy, ox] = best_idx
    return out_arr, arg_arr


def maxpool_backward(floating[:, :, :, ::1] dout, cnp.int64_t[:, :, :, ::1] arg, int h, int w):
    cdef Py_ssize_t n_batch = dout.shape[0], chans = dout.shape[1]
    cdef Py_ssize_t ho = dout.shape[2], wo = dout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((n_batch, chans, h * w), dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, c, oy, ox
    with nogil:
        for n in range(n_batch):
            for c in range(chans):
                for oy in range(ho):
                    for ox in range(wo):
                        dx[n, c, arg[n, c, oy, ox]] += dout[n, c, oy, ox]
    return dx_arr.reshape(n_batch, chans, h, w)
