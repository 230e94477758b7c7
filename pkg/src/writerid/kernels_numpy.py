"""Numpy fallback for the convolution/pooling kernels.

Valid convolution is lowered to one BLAS matmul per call via an im2col
view (stride tricks, no padding). Semantics are identical to the
compiled backend in ``writerid._kernels``; equality of the two is
covered by tests.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def _im2col(x: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, int, int]:
    """Return ((N, OH*OW, C*kh*kw) patch matrix, OH, OW) for valid windows."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (N, C, OH, OW, kh, kw)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid 2-D convolution (correlation), stride 1.

    x: (N, C, H, W), w: (F, C, KH, KW), b: (F,) -> (N, F, OH, OW).
    The matmul runs per sample (stacked GEMM), so a sample's output
    never depends on its position in the batch.
    """
    n = x.shape[0]
    f, _, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw)
    out = np.matmul(cols, w.reshape(f, -1).T) + b  # (N, OH*OW, F)
    return np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward: returns (dx or None, dw, db)."""
    n, c, h, w_in = x.shape
    f, _, kh, kw = w.shape
    oh, ow = dout.shape[2], dout.shape[3]

    dmat = dout.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
    cols, _, _ = _im2col(x, kh, kw)
    dw = (dmat.T @ cols.reshape(n * oh * ow, -1)).reshape(f, c, kh, kw)
    db = dout.sum(axis=(0, 2, 3))

    dx = None
    if need_dx:
        dcols = (dmat @ w.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
        dx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + oh, j : j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def maxpool_forward(x: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling with stride = size; incomplete borders dropped.

    Returns (pooled (N, C, OH, OW), switches int64 of the same shape
    holding the flat row*W+col index of each window's max in the input
    plane; ties go to the first position in window row-major order).
    """
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    xc = x[:, :, : oh * size, : ow * size]
    win = xc.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    ky, kx = arg // size, arg % size
    rows = np.arange(oh)[None, None, :, None] * size + ky
    cols = np.arange(ow)[None, None, None, :] * size + kx
    switches = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out), switches


def maxpool_backward(dout: np.ndarray, switches: np.ndarray, h: int, w: int) -> np.ndarray:
    """Route pooled gradients back to the argmax positions."""
    n, c, oh, ow = dout.shape
    dx = np.zeros((n, c, h * w), dtype=dout.dtype)
    # windows are disjoint, so indices are unique per (n, c) plane
    np.put_along_axis(dx, switches.reshape(n, c, -1), dout.reshape(n, c, -1), axis=2)
    return dx.reshape(n, c, h, w)
