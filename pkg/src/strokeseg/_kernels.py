"""Compiled inner loops for the convolution ops that BLAS does not cover well.

Every kernel keeps a separate unit-stride branch; a runtime stride inside
the innermost index stops numba from vectorizing it.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def depthwise_forward(xp, wk, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = wk.shape[1], wk.shape[2]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for a in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = wk[ch, i, j]
                    if stride == 1:
                        for y in range(ho):
                            for x in range(wo):
                                out[a, ch, y, x] += wv * xp[a, ch, y + i, x + j]
                    else:
                        for y in range(ho):
                            for x in range(wo):
                                out[a, ch, y, x] += wv * xp[a, ch, y * stride + i, x * stride + j]
    return out


@numba.njit(cache=True, fastmath=True)
def depthwise_backward(xp, wk, g, stride, need_x):
    n, c, ho, wo = g.shape
    kh, kw = wk.shape[1], wk.shape[2]
    gw = np.zeros(wk.shape, dtype=g.dtype)
    gxp = np.zeros(xp.shape if need_x else (0, 0, 0, 0), dtype=g.dtype)
    for a in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = wk[ch, i, j]
                    acc = g.dtype.type(0.0)
                    if stride == 1:
                        for y in range(ho):
                            for x in range(wo):
                                acc += g[a, ch, y, x] * xp[a, ch, y + i, x + j]
                        if need_x:
                            for y in range(ho):
                                for x in range(wo):
                                    gxp[a, ch, y + i, x + j] += g[a, ch, y, x] * wv
                    else:
                        for y in range(ho):
                            for x in range(wo):
                                acc += g[a, ch, y, x] * xp[a, ch, y * stride + i, x * stride + j]
                        if need_x:
                            for y in range(ho):
                                for x in range(wo):
                                    gxp[a, ch, y * stride + i, x * stride + j] += g[a, ch, y, x] * wv
                    gw[ch, i, j] += acc
    return gxp, gw


@numba.njit(cache=True)
def col2im(gcols, n, c, hp, wp, kh, kw, stride, ho, wo):
    """Scatter-add (C*kh*kw, N*Ho*Wo) column gradients into a padded (N,C,Hp,Wp) image."""
    out = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for a in range(n):
                    for y in range(ho):
                        base = (a * ho + y) * wo
                        if stride == 1:
                            for x in range(wo):
                                out[a, ch, y + i, x + j] += gcols[row, base + x]
                        else:
                            for x in range(wo):
                                out[a, ch, y * stride + i, x * stride + j] += gcols[row, base + x]
    return out


@numba.njit(cache=True)
def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=xp.dtype)
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for a in range(n):
                    for y in range(ho):
                        base = (a * ho + y) * wo
                        if stride == 1:
                            for x in range(wo):
                                cols[row, base + x] = xp[a, ch, y + i, x + j]
                        else:
                            for x in range(wo):
                                cols[row, base + x] = xp[a, ch, y * stride + i, x * stride + j]
    return cols
