"""numba-compiled kernels; loop-level twins of ``_numpy``."""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=xp.dtype)
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for b in range(n):
                    base = b * ho * wo
                    for y in range(ho):
                        sy = y * stride + i
                        for x in range(wo):
                            cols[row, base + y * wo + x] = xp[b, ci, sy, x * stride + j]
    return cols


@njit(cache=True)
def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for b in range(n):
                    base = b * ho * wo
                    for y in range(ho):
                        sy = y * stride + i
                        for x in range(wo):
                            out[b, ci, sy, x * stride + j] += cols[row, base + y * wo + x]
    return out


@njit(cache=True)
def maxpool_forward(xp, k, stride, ho, wo):
    n, c, hp, wp = xp.shape
    out = np.empty((n, c, ho, wo), dtype=xp.dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ci in range(c):
            for y in range(ho):
                for x in range(wo):
                    y0 = y * stride
                    x0 = x * stride
                    best = xp[b, ci, y0, x0]
                    bi = y0 * wp + x0
                    for i in range(k):
                        for j in range(k):
                            v = xp[b, ci, y0 + i, x0 + j]
                            # strict comparison keeps the first maximum in scan order
                            if v > best:
                                best = v
                                bi = (y0 + i) * wp + x0 + j
                    out[b, ci, y, x] = best
                    idx[b, ci, y, x] = bi
    return out, idx


@njit(cache=True)
def maxpool_backward(gout, idx, hp, wp):
    n, c, ho, wo = gout.shape
    g = np.zeros((n, c, hp * wp), dtype=gout.dtype)
    for b in range(n):
        for ci in range(c):
            for y in range(ho):
                for x in range(wo):
                    g[b, ci, idx[b, ci, y, x]] += gout[b, ci, y, x]
    return g.reshape(n, c, hp, wp)


@njit(cache=True)
def lbp_codes(gray):
    h, w = gray.shape
    dys = (-1, -1, -1, 0, 1, 1, 1, 0)
    dxs = (-1, 0, 1, 1, 1, 0, -1, -1)
    codes = np.zeros((h - 2, w - 2), dtype=np.uint8)
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            cv = gray[y, x]
            code = 0
            for bit in range(8):
                if gray[y + dys[bit], x + dxs[bit]] >= cv:
                    code |= 1 << bit
            codes[y - 1, x - 1] = code
    return codes
