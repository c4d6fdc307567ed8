"""Grouped 2-D convolution kernels in pure NumPy.

All functions operate on an already zero-padded input ``xp`` of shape
``(n, ci, hp, wp)`` and a weight of shape ``(co, ci // groups, kh, kw)``;
padding and stripping live in :mod:`pmaa.kernels`.  Channel-mixing
convolutions go through im2col plus one GEMM per group; depthwise ones
(``groups == ci == co``) use a tap-accumulation loop over the kernel window,
which also fixes the summation order so depthwise results are bit-identical
to per-channel single convolutions.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_hw(hp: int, wp: int, kh: int, kw: int, sh: int, sw: int) -> tuple[int, int]:
    return (hp - kh) // sh + 1, (wp - kw) // sw + 1


def _is_depthwise(ci: int, co: int, groups: int) -> bool:
    return groups == ci and co == ci


def _im2col(xg: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """(n, cg, hp, wp) -> (n * ho * wo, cg * kh * kw), row-major over (n, y, x)."""
    win = sliding_window_view(xg, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, cg, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cg * kh * kw)


def conv2d_forward_padded(xp, w, sh, sw, groups):
    n, ci, hp, wp = xp.shape
    co, cig, kh, kw = w.shape
    ho, wo = _out_hw(hp, wp, kh, kw, sh, sw)

    if _is_depthwise(ci, co, groups):
        out = np.zeros((n, co, ho, wo))
        taps = w[:, 0]  # (c, kh, kw)
        for ky in range(kh):
            for kx in range(kw):
                out += taps[None, :, ky, kx, None, None] * xp[:, :, ky::sh, kx::sw][:, :, :ho, :wo]
        return out

    cog = co // groups
    out = np.empty((n, co, ho, wo))
    for g in range(groups):
        cols = _im2col(xp[:, g * cig:(g + 1) * cig], kh, kw, sh, sw)
        wmat = w[g * cog:(g + 1) * cog].reshape(cog, -1)
        out[:, g * cog:(g + 1) * cog] = (cols @ wmat.T).reshape(n, ho, wo, cog).transpose(0, 3, 1, 2)
    return out


def conv2d_backward_input_padded(go, w, xp_shape, sh, sw, groups):
    """Gradient w.r.t. the padded input, same shape as ``xp``."""
    n, ci, hp, wp = xp_shape
    co, cig, kh, kw = w.shape
    ho, wo = go.shape[2], go.shape[3]
    gxp = np.zeros((n, ci, hp, wp))

    if _is_depthwise(ci, co, groups):
        taps = w[:, 0]
        for ky in range(kh):
            for kx in range(kw):
                gxp[:, :, ky::sh, kx::sw][:, :, :ho, :wo] += taps[None, :, ky, kx, None, None] * go
        return gxp

    cog = co // groups
    for g in range(groups):
        gom = go[:, g * cog:(g + 1) * cog].transpose(0, 2, 3, 1).reshape(n * ho * wo, cog)
        wmat = w[g * cog:(g + 1) * cog].reshape(cog, -1)
        gpat = (gom @ wmat).reshape(n, ho, wo, cig, kh, kw)
        for ky in range(kh):
            for kx in range(kw):
                gxp[:, g * cig:(g + 1) * cig, ky::sh, kx::sw][:, :, :ho, :wo] += \
                    gpat[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return gxp


def conv2d_backward_weight_padded(go, xp, w_shape, sh, sw, groups):
    co, cig, kh, kw = w_shape
    n, ci = xp.shape[:2]
    ho, wo = go.shape[2], go.shape[3]
    gw = np.empty(w_shape)

    if _is_depthwise(ci, co, groups):
        for ky in range(kh):
            for kx in range(kw):
                gw[:, 0, ky, kx] = (xp[:, :, ky::sh, kx::sw][:, :, :ho, :wo] * go).sum(axis=(0, 2, 3))
        return gw

    cog = co // groups
    for g in range(groups):
        cols = _im2col(xp[:, g * cig:(g + 1) * cig], kh, kw, sh, sw)
        gom = go[:, g * cog:(g + 1) * cog].transpose(0, 2, 3, 1).reshape(n * ho * wo, cog)
        gw[g * cog:(g + 1) * cog] = (gom.T @ cols).reshape(cog, cig, kh, kw)
    return gw
