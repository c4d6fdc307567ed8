"""Convolution kernel backends.

Two interchangeable implementations of the same padded-array contract:

* ``compiled``: Cython direct loops (:mod:`pmaa.kernels._convext`), built by
  ``setup.py``;
* ``numpy``: im2col / tap-accumulation fallback
  (:mod:`pmaa.kernels.numpy_backend`).

The compiled core is picked at import time when available; the
``PMAA_KERNELS`` environment variable (``numpy`` or ``compiled``) forces a
choice, and :func:`use_backend` switches at runtime (used by the benchmark).
Results agree to floating-point roundoff; each backend is deterministic on
its own.
"""

import os

import numpy as np

from pmaa.kernels import numpy_backend

__all__ = [
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "active_backend",
    "available_backends",
    "use_backend",
]

try:
    from pmaa.kernels import _convext
except ImportError:
    _convext = None


class _HybridCompiled:
    """The compiled backend: Cython direct loops for depthwise convolutions
    (where a GEMM cannot help), the im2col/GEMM path for channel-mixing ones
    (where BLAS wins).  Routing matches ``numpy_backend``'s depthwise test,
    so the depthwise-equals-composed bit-identity holds per backend."""

    @staticmethod
    def _depthwise(ci: int, co: int, groups: int) -> bool:
        return groups == ci and co == ci

    def conv2d_forward_padded(self, xp, w, sh, sw, groups):
        if self._depthwise(xp.shape[1], w.shape[0], groups):
            return _convext.conv2d_forward_padded(xp, w, sh, sw, groups)
        return numpy_backend.conv2d_forward_padded(xp, w, sh, sw, groups)

    def conv2d_backward_input_padded(self, go, w, xp_shape, sh, sw, groups):
        if self._depthwise(xp_shape[1], w.shape[0], groups):
            return _convext.conv2d_backward_input_padded(go, w, tuple(xp_shape), sh, sw, groups)
        return numpy_backend.conv2d_backward_input_padded(go, w, xp_shape, sh, sw, groups)

    def conv2d_backward_weight_padded(self, go, xp, w_shape, sh, sw, groups):
        if self._depthwise(xp.shape[1], w_shape[0], groups):
            return _convext.conv2d_backward_weight_padded(go, xp, tuple(w_shape), sh, sw, groups)
        return numpy_backend.conv2d_backward_weight_padded(go, xp, w_shape, sh, sw, groups)


_BACKENDS = {"numpy": numpy_backend}
if _convext is not None:
    _BACKENDS["compiled"] = _HybridCompiled()


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def use_backend(name: str) -> None:
    global _impl, _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _impl = _BACKENDS[name]
    _active = name


def active_backend() -> str:
    return _active


_requested = os.environ.get("PMAA_KERNELS")
if _requested:
    use_backend(_requested)
else:
    use_backend("compiled" if _convext is not None else "numpy")


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_forward(x, w, stride, padding, groups):
    sh, sw = stride
    ph, pw = padding
    xp = _pad(x, ph, pw)
    return _impl.conv2d_forward_padded(xp, np.ascontiguousarray(w), sh, sw, groups)


def conv2d_backward_input(go, w, x_shape, stride, padding, groups):
    sh, sw = stride
    ph, pw = padding
    n, ci, h, wd = x_shape
    xp_shape = (n, ci, h + 2 * ph, wd + 2 * pw)
    gxp = _impl.conv2d_backward_input_padded(
        np.ascontiguousarray(go), np.ascontiguousarray(w), xp_shape, sh, sw, groups
    )
    if ph == 0 and pw == 0:
        return gxp
    return gxp[:, :, ph:ph + h, pw:pw + wd]


def conv2d_backward_weight(go, x, w_shape, stride, padding, groups):
    sh, sw = stride
    ph, pw = padding
    xp = _pad(x, ph, pw)
    return _impl.conv2d_backward_weight_padded(
        np.ascontiguousarray(go), xp, w_shape, sh, sw, groups
    )
