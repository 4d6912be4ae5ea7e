"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with the same signature and
the same result (up to floating point summation order in ``col2im``).
"""

import numpy as np

# clockwise from top-left; bit i of the code belongs to offset i
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    return out


def maxpool_forward(xp, k, stride, ho, wo):
    """Max over each window plus the flat (row-major, padded plane) index of the
    first maximal element."""
    n, c, hp, wp = xp.shape
    wins = np.empty((k * k, n, c, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            wins[i * k + j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    arg = wins.argmax(axis=0)  # argmax returns the first occurrence
    out = np.take_along_axis(wins, arg[None], axis=0)[0]
    di, dj = np.divmod(arg, k)
    ys = (np.arange(ho) * stride)[:, None]
    xs = (np.arange(wo) * stride)[None, :]
    idx = (ys + di) * wp + (xs + dj)
    return out, idx.astype(np.int64)


def maxpool_backward(gout, idx, hp, wp):
    n, c = gout.shape[:2]
    plane = hp * wp
    offs = (np.arange(n * c, dtype=np.int64) * plane).reshape(n, c, 1, 1)
    flat = (idx + offs).ravel()
    g = np.bincount(flat, weights=gout.ravel(), minlength=n * c * plane)
    return g.astype(gout.dtype).reshape(n, c, hp, wp)


def lbp_codes(gray):
    h, w = gray.shape
    center = gray[1:h - 1, 1:w - 1]
    codes = np.zeros(center.shape, dtype=np.uint8)
    for bit, (dy, dx) in enumerate(LBP_OFFSETS):
        nb = gray[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        codes |= (nb >= center).astype(np.uint8) << bit
    return codes
