# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for NHWC convolutions.

Accumulation order in ``col2im`` matches the numpy fallback exactly, so both
backends give bit-identical results.
"""
import numpy as np

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int k, int stride):
    cdef Py_ssize_t n_img = xp.shape[0], hp = xp.shape[1], wp = xp.shape[2], ch = xp.shape[3]
    cdef Py_ssize_t ho = (hp - k) // stride + 1
    cdef Py_ssize_t wo = (wp - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n_img, ho, wo, k, k, ch), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oh, ow, i, j, c, r0, c0
    with nogil:
        for n in range(n_img):
            for oh in range(ho):
                r0 = oh * stride
                for ow in range(wo):
                    c0 = ow * stride
                    for i in range(k):
                        for j in range(k):
                            for c in range(ch):
                                out[n, oh, ow, i, j, c] = xp[n, r0 + i, c0 + j, c]
    return out_arr


def col2im(real[:, :, :, :, :, ::1] cols, int hp, int wp, int stride):
    cdef Py_ssize_t n_img = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t k = cols.shape[3], ch = cols.shape[5]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_img, hp, wp, ch), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oh, ow, i, j, c
    # (i, j) outermost: every output cell receives its terms in the same
    # order as the sliced-add fallback.
    with nogil:
        for i in range(k):
            for j in range(k):
                for n in range(n_img):
                    for oh in range(ho):
                        for ow in range(wo):
                            for c in range(ch):
                                out[n, oh * stride + i, ow * stride + j, c] += cols[n, oh, ow, i, j, c]
    return out_arr
