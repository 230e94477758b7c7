# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution/pooling kernels.

Convolution is lowered to the same BLAS matmul as in
writerid.kernels_numpy (identical operand layouts), but the
im2col/col2im layout passes and the pooling loops run as tight C loops
instead of strided ndarray copies. Equivalence of the two backends is
covered by tests.
"""

import numpy as np

BACKEND = "compiled"

ctypedef fused real:
    float
    double


cdef void _im2col(real[:, :, :, ::1] x, real[:, ::1] cols,
                  Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    # cols[(i*oh+oy)*ow+ox, (ci*kh+ky)*kw+kx] = x[i, ci, oy+ky, ox+kx]
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t i, ci, ky, kx, oy, ox, row, col
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (i * oh + oy) * ow + ox
                for ci in range(c):
                    for ky in range(kh):
                        col = (ci * kh + ky) * kw
                        for kx in range(kw):
                            cols[row, col + kx] = x[i, ci, oy + ky, ox + kx]


cdef void _col2im(real[:, ::1] dcols, real[:, :, :, ::1] dx,
                  Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t n = dx.shape[0], c = dx.shape[1]
    cdef Py_ssize_t i, ci, ky, kx, oy, ox, row, col
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (i * oh + oy) * ow + ox
                for ci in range(c):
                    for ky in range(kh):
                        col = (ci * kh + ky) * kw
                        for kx in range(kw):
                            dx[i, ci, oy + ky, ox + kx] += dcols[row, col + kx]


cdef void _planes_to_rows(real[:, :, :, ::1] y, real[:, ::1] mat) noexcept nogil:
    # mat[(i*oh+oy)*ow+ox, f] = y[i, f, oy, ox]
    cdef Py_ssize_t n = y.shape[0], f = y.shape[1], oh = y.shape[2], ow = y.shape[3]
    cdef Py_ssize_t i, fi, oy, ox, row0
    for i in range(n):
        for fi in range(f):
            for oy in range(oh):
                row0 = (i * oh + oy) * ow
                for ox in range(ow):
                    mat[row0 + ox, fi] = y[i, fi, oy, ox]


cdef void _rows_to_planes(real[:, ::1] mat, real[:, :, :, ::1] y, real[::1] bias) noexcept nogil:
    cdef Py_ssize_t n = y.shape[0], f = y.shape[1], oh = y.shape[2], ow = y.shape[3]
    cdef Py_ssize_t i, fi, oy, ox, row0
    for i in range(n):
        for fi in range(f):
            for oy in range(oh):
                row0 = (i * oh + oy) * ow
                for ox in range(ow):
                    y[i, fi, oy, ox] = mat[row0 + ox, fi] + bias[fi]


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = h - kh + 1, ow = wi - kw + 1
    dtype = np.float32 if real is float else np.float64

    cols_np = np.empty((n * oh * ow, c * kh * kw), dtype=dtype)
    cdef real[:, ::1] cols = cols_np
    with nogil:
        _im2col(x, cols, kh, kw, oh, ow)

    wmat = np.asarray(w).reshape(f, c * kh * kw)
    # per-sample stacked GEMM: a sample's output is independent of its
    # batch position (duplicate inputs stay bit-identical)
    mat_np = np.matmul(cols_np.reshape(n, oh * ow, c * kh * kw), wmat.T)
    cdef real[:, ::1] mat = mat_np.reshape(n * oh * ow, f)
    out_np = np.empty((n, f, oh, ow), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_np
    with nogil:
        _rows_to_planes(mat, out, b)
    return out_np


def conv2d_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                    real[:, :, :, ::1] dout, bint need_dx=True):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    dtype = np.float32 if real is float else np.float64

    dmat_np = np.empty((n * oh * ow, f), dtype=dtype)
    cdef real[:, ::1] dmat = dmat_np
    cols_np = np.empty((n * oh * ow, c * kh * kw), dtype=dtype)
    cdef real[:, ::1] cols = cols_np
    with nogil:
        _planes_to_rows(dout, dmat)
        _im2col(x, cols, kh, kw, oh, ow)

    dw_np = np.dot(dmat_np.T, cols_np).reshape(f, c, kh, kw)  # BLAS
    db_np = np.asarray(dout).sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw_np, db_np

    wmat = np.asarray(w).reshape(f, c * kh * kw)
    dcols_np = np.dot(dmat_np, wmat)  # (N*OH*OW, C*KH*KW), BLAS
    cdef real[:, ::1] dcols = dcols_np
    dx_np = np.zeros((n, c, h, wi), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_np
    with nogil:
        _col2im(dcols, dx, kh, kw, oh, ow)
    return dx_np, dw_np, db_np


def maxpool_forward(real[:, :, :, ::1] x, Py_ssize_t size):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h // size, ow = w // size
    cdef Py_ssize_t i, ci, oy, ox, ky, kx, by, bx
    cdef real best, v

    out_np = np.empty((n, c, oh, ow), dtype=np.float32 if real is float else np.float64)
    sw_np = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_np
    cdef long long[:, :, :, ::1] sw = sw_np

    with nogil:
        for i in range(n):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        best = x[i, ci, oy * size, ox * size]
                        by = oy * size
                        bx = ox * size
                        for ky in range(size):
                            for kx in range(size):
                                v = x[i, ci, oy * size + ky, ox * size + kx]
                                if v > best:
                                    best = v
                                    by = oy * size + ky
                                    bx = ox * size + kx
                        out[i, ci, oy, ox] = best
                        sw[i, ci, oy, ox] = by * w + bx
    return out_np, sw_np


def maxpool_backward(real[:, :, :, ::1] dout, long long[:, :, :, ::1] switches,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    cdef Py_ssize_t i, ci, oy, ox
    cdef long long idx

    dx_np = np.zeros((n, c, h, w), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] dx = dx_np
    with nogil:
        for i in range(n):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        idx = switches[i, ci, oy, ox]
                        dx[i, ci, idx // w, idx % w] = dout[i, ci, oy, ox]
    return dx_np
