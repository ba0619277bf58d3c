"""Pure-numpy im2col / col2im, used when the compiled extension is missing."""
import numpy as np


def im2col(xp, k, stride):
    n, hp, wp, ch = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    out = np.empty((n, ho, wo, k, k, ch), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride,
                                       j:j + stride * (wo - 1) + 1:stride, :]
    return out


def col2im(cols, hp, wp, stride):
    n, ho, wo, k, _, ch = cols.shape
    out = np.zeros((n, hp, wp, ch), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride, :] += cols[:, :, :, i, j, :]
    return out
