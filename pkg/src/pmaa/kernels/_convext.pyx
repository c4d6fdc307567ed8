# cython: boundscheck=False, wraparound=False, cdivision=True
"""Direct-loop convolution kernels (compiled core).

Same padded-input contract as :mod:`pmaa.kernels.numpy_backend`.  Loops use
a fixed accumulation order (group, output channel, pixel, tap), so results
are deterministic and depthwise convolutions match composed single-channel
convolutions bit for bit.
"""

import numpy as np


def conv2d_forward_padded(double[:, :, :, ::1] xp, double[:, :, :, ::1] w,
                          int sh, int sw, int groups):
    cdef Py_ssize_t n = xp.shape[0], ci = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t co = w.shape[0], cig = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // sh + 1
    cdef Py_ssize_t wo = (wp - kw) // sw + 1
    cdef Py_ssize_t cog = co // groups

    out_arr = np.zeros((n, co, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, oc, g, ic, oy, ox, ky, kx, iy0, ix0
    cdef double acc

    for i in range(n):
        for oc in range(co):
            g = oc // cog
            for oy in range(ho):
                iy0 = oy * sh
                for ox in range(wo):
                    ix0 = ox * sw
                    acc = 0.0
                    for ic in range(cig):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += w[oc, ic, ky, kx] * xp[i, g * cig + ic, iy0 + ky, ix0 + kx]
                    out[i, oc, oy, ox] = acc
    return out_arr


def conv2d_backward_input_padded(double[:, :, :, ::1] go, double[:, :, :, ::1] w,
                                 xp_shape, int sh, int sw, int groups):
    cdef Py_ssize_t n = xp_shape[0], ci = xp_shape[1], hp = xp_shape[2], wp = xp_shape[3]
    cdef Py_ssize_t co = w.shape[0], cig = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = go.shape[2], wo = go.shape[3]
    cdef Py_ssize_t cog = co // groups

    gxp_arr = np.zeros((n, ci, hp, wp))
    cdef double[:, :, :, ::1] gxp = gxp_arr
    cdef Py_ssize_t i, oc, g, ic, oy, ox, ky, kx, iy0, ix0
    cdef double gv

    for i in range(n):
        for oc in range(co):
            g = oc // cog
            for oy in range(ho):
                iy0 = oy * sh
                for ox in range(wo):
                    ix0 = ox * sw
                    gv = go[i, oc, oy, ox]
                    for ic in range(cig):
                        for ky in range(kh):
                            for kx in range(kw):
                                gxp[i, g * cig + ic, iy0 + ky, ix0 + kx] += w[oc, ic, ky, kx] * gv
    return gxp_arr


def conv2d_backward_weight_padded(double[:, :, :, ::1] go, double[:, :, :, ::1] xp,
                                  w_shape, int sh, int sw, int groups):
    cdef Py_ssize_t co = w_shape[0], cig = w_shape[1], kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t n = xp.shape[0], ci = xp.shape[1]
    cdef Py_ssize_t ho = go.shape[2], wo = go.shape[3]
    cdef Py_ssize_t cog = co // groups

    gw_arr = np.zeros((co, cig, kh, kw))
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t i, oc, g, ic, oy, ox, ky, kx, iy0, ix0
    cdef double gv

    for i in range(n):
        for oc in range(co):
            g = oc // cog
            for oy in range(ho):
                iy0 = oy * sh
                for ox in range(wo):
                    ix0 = ox * sw
                    gv = go[i, oc, oy, ox]
                    for ic in range(cig):
                        for ky in range(kh):
                            for kx in range(kw):
                                gw[oc, ic, ky, kx] += xp[i, g * cig + ic, iy0 + ky, ix0 + kx] * gv
    return gw_arr
