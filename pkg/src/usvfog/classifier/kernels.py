"""Compiled depthwise 3x3 kernels over channels-last input with implicit zero padding."""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def depthwise_forward(x, w, stride, ho, wo):
    """x: (N, H, W, C); w: (3, 3, C). Padding 1 on each side."""
    n, h, wd, c = x.shape
    out = np.zeros((n, ho, wo, c), dtype=x.dtype)
    for i in range(n):
        for y in range(ho):
            for xx in range(wo):
                o = out[i, y, xx]
                for a in range(3):
                    r = stride * y + a - 1
                    if r < 0 or r >= h:
                        continue
                    for b in range(3):
                        q = stride * xx + b - 1
                        if q < 0 or q >= wd:
                            continue
                        src = x[i, r, q]
                        wv = w[a, b]
                        for ch in range(c):
                            o[ch] += wv[ch] * src[ch]
    return out


@numba.njit(cache=True, fastmath=True)
def depthwise_backward(dout, x, w, stride):
    """Returns (dx, dw); weight gradients accumulate in float64."""
    n, ho, wo, c = dout.shape
    h, wd = x.shape[1], x.shape[2]
    dx = np.zeros_like(x)
    dw = np.zeros((3, 3, c), dtype=np.float64)
    for i in range(n):
        for y in range(ho):
            for xx in range(wo):
                g = dout[i, y, xx]
                for a in range(3):
                    r = stride * y + a - 1
                    if r < 0 or r >= h:
                        continue
                    for b in range(3):
                        q = stride * xx + b - 1
                        if q < 0 or q >= wd:
                            continue
                        src = x[i, r, q]
                        dst = dx[i, r, q]
                        wv = w[a, b]
                        acc = dw[a, b]
                        for ch in range(c):
                            acc[ch] += g[ch] * src[ch]
                            dst[ch] += g[ch] * wv[ch]
    return dx, dw.astype(w.dtype)
