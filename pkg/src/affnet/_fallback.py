"""Pure-numpy versions of the hot kernels in ``_kernels.pyx``.

Every function here returns bitwise the same result as its compiled twin:
accumulation orders were chosen to match the loop nests in the extension.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k, stride, ho, wo):
    # (N, C, Ho, Wo, k, k) strided view
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def im2col(x, k, stride, pad, ho, wo):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c = x.shape[:2]
    win = _windows(x, k, stride, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * k * k)


def col2im(cols, chans, h, w, k, stride, pad, ho, wo):
    n = cols.shape[0]
    padded = np.zeros((n, chans, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, ho, wo, chans, k, k)
    # descending offsets reproduce the compiled kernel's summation order
    for ki in reversed(range(k)):
        for kj in reversed(range(k)):
            padded[:, :, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride] += cols6[..., ki, kj].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(padded[:, :, pad : pad + h, pad : pad + w])
    return padded


def maxpool_forward(x, k, stride, ho, wo):
    n, c, h, w = x.shape
    win = _windows(x, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    local = np.argmax(win, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ki, kj = np.divmod(local, k)
    rows = np.arange(ho)[:, None] * stride + ki
    cols = np.arange(wo)[None, :] * stride + kj
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(dout, arg, h, w):
    n, c = dout.shape[:2]
    dx = np.zeros((n, c, h * w), dtype=dout.dtype)
    flat = arg.reshape(n * c, -1) + (np.arange(n * c) * (h * w))[:, None]
    np.add.at(dx.reshape(-1), flat.reshape(-1), dout.reshape(-1))
    return dx.reshape(n, c, h, w)
