"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names at the bottom of the module (``im2col``, ``col2im``,
``adaptive_max_pool_2d``, ``resample_rows``) are bound to one flavour at
import time according to :mod:`resdistill._accel`. Both flavours stay
importable as ``*_numba`` / ``*_numpy`` for tests and benchmarks.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit


# --------------------------------------------------------------------------
# im2col / col2im
# cols layout: (B, Ho, Wo, C, K, K), so that cols.reshape(B*Ho*Wo, C*K*K)
# multiplies a weight matrix of shape (C_out, C*K*K).
# --------------------------------------------------------------------------


def im2col_numpy(xp, k, stride, ho, wo):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im_numpy(cols, hp, wp, stride):
    b, ho, wo, c, k, _ = cols.shape
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * (ho - 1) + 1 : stride,
                kj : kj + stride * (wo - 1) + 1 : stride] += cols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return out


@njit
def im2col_numba(xp, k, stride, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b, ho, wo, c, k, k), dtype=xp.dtype)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                r0 = i * stride
                c0 = j * stride
                for ch in range(c):
                    for ki in range(k):
                        for kj in range(k):
                            cols[n, i, j, ch, ki, kj] = xp[n, ch, r0 + ki, c0 + kj]
    return cols


@njit
def col2im_numba(cols, hp, wp, stride):
    b, ho, wo, c, k = cols.shape[0], cols.shape[1], cols.shape[2], cols.shape[3], cols.shape[4]
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    # same accumulation order as the numpy path: taps outermost
    for ki in range(k):
        for kj in range(k):
            for n in range(b):
                for i in range(ho):
                    for j in range(wo):
                        r = i * stride + ki
                        q = j * stride + kj
                        for ch in range(c):
                            out[n, ch, r, q] += cols[n, i, j, ch, ki, kj]
    return out


# --------------------------------------------------------------------------
# adaptive max pooling over (N, H, W) with floor-partitioned regions
# --------------------------------------------------------------------------


def _bounds(size, out):
    idx = np.arange(out + 1)
    return (idx * size) // out


def adaptive_max_pool_2d_numpy(x, out_h, out_w):
    n, h, w = x.shape
    rb = _bounds(h, out_h)
    cb = _bounds(w, out_w)
    out = np.empty((n, out_h, out_w), dtype=x.dtype)
    for r in range(out_h):
        for c in range(out_w):
            out[:, r, c] = x[:, rb[r] : rb[r + 1], cb[c] : cb[c + 1]].max(axis=(1, 2))
    return out


@njit
def adaptive_max_pool_2d_numba(x, out_h, out_w):
    n, h, w = x.shape
    out = np.empty((n, out_h, out_w), dtype=x.dtype)
    for m in range(n):
        for r in range(out_h):
            r0 = (r * h) // out_h
            r1 = ((r + 1) * h) // out_h
            for c in range(out_w):
                c0 = (c * w) // out_w
                c1 = ((c + 1) * w) // out_w
                best = x[m, r0, c0]
                for i in range(r0, r1):
                    for j in range(c0, c1):
                        v = x[m, i, j]
                        if v > best:
                            best = v
                out[m, r, c] = best
    return out


# --------------------------------------------------------------------------
# 1-D gather-and-weight resampling along the last axis
# y[n, o] = sum_t weights[o, t] * x[n, index[o, t]]
# --------------------------------------------------------------------------


def resample_rows_numpy(x, index, weights):
    return np.einsum("not,ot->no", x[:, index], weights)


@njit
def resample_rows_numba(x, index, weights):
    n = x.shape[0]
    n_out, taps = index.shape
    out = np.zeros((n, n_out), dtype=np.float64)
    for m in range(n):
        for o in range(n_out):
            acc = 0.0
            for t in range(taps):
                acc += weights[o, t] * x[m, index[o, t]]
            out[m, o] = acc
    return out


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    adaptive_max_pool_2d = adaptive_max_pool_2d_numba
    resample_rows = resample_rows_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    adaptive_max_pool_2d = adaptive_max_pool_2d_numpy
    resample_rows = resample_rows_numpy
