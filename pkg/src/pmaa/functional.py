"""Differentiable primitives over rank-4 tensors.

Each function validates its arguments, computes the forward value in
float64, and registers a backward closure on the output when gradient
tracking is active.  There is no implicit broadcasting: binary ops demand
identical shapes, and the one sanctioned broadcast is multiplication by a
learnable ``(1, 1, 1, 1)`` scalar (:func:`scalar_scale`).

A cost hook (:func:`set_mac_hook`) lets the cost counter observe the
multiply-accumulate volume of convolutions, gating products, and patch
attention as they execute.
"""

import math

import numpy as np

from pmaa import kernels
from pmaa.tensor import Tensor, record

__all__ = [
    "conv2d",
    "adaptive_avg_pool2d",
    "upsample_nearest",
    "instance_norm2d",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "tanh",
    "scalar_scale",
    "scale",
    "absolute",
    "sum_all",
    "concat_channels",
    "patch_attention",
    "set_mac_hook",
]

_mac_hook = None


def set_mac_hook(hook) -> None:
    """Install ``hook(kind: str, count: int)`` to observe MAC volume; None clears."""
    global _mac_hook
    _mac_hook = hook


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, groups: int = 1) -> Tensor:
    """Cross-correlation with zero padding.

    ``weight`` has shape ``(co, ci // groups, kh, kw)`` with odd ``kh, kw``;
    ``bias``, when present, has shape ``(1, co, 1, 1)``.  ``groups == ci``
    with ``co == ci`` is the depthwise case, ``kh == kw == 1`` the pointwise
    one.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, ci, h, w = x.shape
    co, cig, kh, kw = weight.shape

    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {(ph, pw)}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {(kh, kw)}")
    if groups < 1 or ci % groups != 0:
        raise ValueError(f"conv2d: input channels {ci} not divisible by groups {groups}")
    if co % groups != 0:
        raise ValueError(f"conv2d: output channels {co} not divisible by groups {groups}")
    if cig != ci // groups:
        raise ValueError(
            f"conv2d: weight expects {cig} input channels per group, input provides "
            f"{ci // groups} (ci={ci}, groups={groups})"
        )
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: empty output for input {h}x{w}, kernel {kh}x{kw}, "
                         f"stride {(sh, sw)}, padding {(ph, pw)}")
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match (1, {co}, 1, 1)")

    if _mac_hook is not None:
        _mac_hook("conv", kh * kw * cig * co * ho * wo * n)

    y = kernels.conv2d_forward(x.data, weight.data, (sh, sw), (ph, pw), groups)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    x_data, w_data = x.data, weight.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.conv2d_backward_input(g, w_data, x_data.shape, (sh, sw), (ph, pw), groups)
        if weight.requires_grad:
            gw = kernels.conv2d_backward_weight(g, x_data, w_data.shape, (sh, sw), (ph, pw), groups)
        if bias is None:
            return (gx, gw)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)
        return (gx, gw, gb)

    return record("conv2d", inputs, out, backward_fn)


def adaptive_avg_pool2d(x: Tensor, out_size) -> Tensor:
    """Mean over bins ``floor(i*h/ho) .. ceil((i+1)*h/ho) - 1`` per axis."""
    ho, wo = _pair(out_size)
    n, c, h, w = x.shape
    if not (1 <= ho <= h and 1 <= wo <= w):
        raise ValueError(f"adaptive_avg_pool2d: out_size {(ho, wo)} exceeds input {(h, w)}")

    if h % ho == 0 and w % wo == 0:
        bh, bw = h // ho, w // wo
        y = x.data.reshape(n, c, ho, bh, wo, bw).mean(axis=(3, 5))

        def backward_fn(g):
            if not x.requires_grad:
                return (None,)
            return (np.repeat(np.repeat(g, bh, axis=2), bw, axis=3) / (bh * bw),)

        return record("adaptive_avg_pool2d", (x,), Tensor(y), backward_fn)

    row_bins = [(i * h // ho, -((-(i + 1) * h) // ho)) for i in range(ho)]
    col_bins = [(j * w // wo, -((-(j + 1) * w) // wo)) for j in range(wo)]
    y = np.empty((n, c, ho, wo))
    for i, (r0, r1) in enumerate(row_bins):
        for j, (c0, c1) in enumerate(col_bins):
            y[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros((n, c, h, w))
        for i, (r0, r1) in enumerate(row_bins):
            for j, (c0, c1) in enumerate(col_bins):
                gx[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return record("adaptive_avg_pool2d", (x,), Tensor(y), backward_fn)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate every cell into a ``factor x factor`` block."""
    if factor < 1:
        raise ValueError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record("upsample_nearest", (x,), Tensor(y), backward_fn)


def instance_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) standardization over the spatial plane.

    Uses the biased variance; the gradient flows through mean and variance.
    ``gamma`` and ``beta`` have shape ``(1, c, 1, 1)``.
    """
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ValueError(
            f"instance_norm2d: affine shapes {gamma.shape}, {beta.shape} do not match (1, {c}, 1, 1)"
        )
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gamma.data * xhat + beta.data
    g_data = gamma.data

    def backward_fn(g):
        gx = gg = gb = None
        if x.requires_grad:
            gm = g.mean(axis=(2, 3), keepdims=True)
            gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
            gx = g_data * inv * (g - gm - xhat * gxm)
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        return (gx, gg, gb)

    return record("instance_norm2d", (x, gamma, beta), Tensor(y), backward_fn)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return record("add", (a, b), out, backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)

    def backward_fn(g):
        return (g if a.requires_grad else None, -g if b.requires_grad else None)

    return record("sub", (a, b), out, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; counted as one MAC per element by the cost hook."""
    _check_same_shape("mul", a, b)
    if _mac_hook is not None:
        _mac_hook("gate", a.numel)
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return (g * b_data if a.requires_grad else None,
                g * a_data if b.requires_grad else None)

    return record("mul", (a, b), out, backward_fn)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0  # gradient at exactly 0 is 0

    def backward_fn(g):
        return (g * mask if x.requires_grad else None,)

    return record("relu", (x,), out, backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward_fn(g):
        return (g * s * (1.0 - s) if x.requires_grad else None,)

    return record("sigmoid", (x,), Tensor(s), backward_fn)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - t * t) if x.requires_grad else None,)

    return record("tanh", (x,), Tensor(t), backward_fn)


def scalar_scale(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply by a learnable ``(1, 1, 1, 1)`` scalar (broadcast)."""
    if alpha.shape != (1, 1, 1, 1):
        raise ValueError(f"scalar_scale: alpha must have shape (1,1,1,1), got {alpha.shape}")
    out = Tensor(x.data * alpha.data)
    x_data, a_data = x.data, alpha.data

    def backward_fn(g):
        gx = g * a_data if x.requires_grad else None
        ga = (g * x_data).sum().reshape(1, 1, 1, 1) if alpha.requires_grad else None
        return (gx, ga)

    return record("scalar_scale", (x, alpha), out, backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    out = Tensor(x.data * factor)

    def backward_fn(g):
        return (g * factor if x.requires_grad else None,)

    return record("scale", (x,), out, backward_fn)


def absolute(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    sign = np.sign(x.data)  # sign(0) = 0

    def backward_fn(g):
        return (g * sign if x.requires_grad else None,)

    return record("absolute", (x,), out, backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a (1, 1, 1, 1) scalar."""
    out = Tensor(x.data.sum().reshape(1, 1, 1, 1))
    shape = x.shape

    def backward_fn(g):
        return (np.full(shape, g.reshape(())) if x.requires_grad else None,)

    return record("sum_all", (x,), out, backward_fn)


def concat_channels(xs: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis; blocks keep argument order."""
    if not xs:
        raise ValueError("concat_channels: need at least one input")
    n, _, h, w = xs[0].shape
    for i, t in enumerate(xs):
        if t.shape[0] != n or t.shape[2] != h or t.shape[3] != w:
            raise ValueError(
                f"concat_channels: input {i} has shape {t.shape}, expected (n={n}, *, h={h}, w={w})"
            )
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    offsets = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward_fn(g):
        return tuple(
            g[:, offsets[i]:offsets[i + 1]] if t.requires_grad else None
            for i, t in enumerate(xs)
        )

    return record("concat_channels", tuple(xs), out, backward_fn)


def _to_patches(d: np.ndarray, p: int) -> np.ndarray:
    """(n, c, h, w) -> (n, h//p, w//p, c, p*p)."""
    n, c, h, w = d.shape
    return d.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5).reshape(
        n, h // p, w // p, c, p * p)


def _from_patches(d: np.ndarray, shape: tuple, p: int) -> np.ndarray:
    n, c, h, w = shape
    return d.reshape(n, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)


def patch_attention(q: Tensor, k: Tensor, v: Tensor, patch_size: int) -> Tensor:
    """Softmax self-attention over the positions of each non-overlapping patch.

    Scores are ``q . k / sqrt(c)`` between positions inside one
    ``patch_size x patch_size`` patch; patches do not interact.
    """
    _check_same_shape("patch_attention", q, k)
    _check_same_shape("patch_attention", q, v)
    n, c, h, w = q.shape
    p = patch_size
    if p < 1 or h % p != 0 or w % p != 0:
        raise ValueError(f"patch_attention: patch_size {p} does not divide input {h}x{w}")

    qp = _to_patches(q.data, p)
    kp = _to_patches(k.data, p)
    vp = _to_patches(v.data, p)
    inv_sqrt_c = 1.0 / math.sqrt(c)

    scores = np.einsum("nhwci,nhwcj->nhwij", qp, kp) * inv_sqrt_c
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    out_p = np.einsum("nhwcj,nhwij->nhwci", vp, attn)

    if _mac_hook is not None:
        npatch = (h // p) * (w // p)
        _mac_hook("attention", 2 * n * npatch * c * (p * p) ** 2)

    out = Tensor(_from_patches(out_p, q.shape, p))

    def backward_fn(g):
        gp = _to_patches(g, p)
        gq = gk = gv = None
        if v.requires_grad:
            gv = _from_patches(np.einsum("nhwci,nhwij->nhwcj", gp, attn), q.shape, p)
        if q.requires_grad or k.requires_grad:
            d_attn = np.einsum("nhwcj,nhwci->nhwij", vp, gp)
            d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                gq = _from_patches(
                    np.einsum("nhwij,nhwcj->nhwci", d_scores, kp) * inv_sqrt_c, q.shape, p)
            if k.requires_grad:
                gk = _from_patches(
                    np.einsum("nhwij,nhwci->nhwcj", d_scores, qp) * inv_sqrt_c, q.shape, p)
        return (gq, gk, gv)

    return record("patch_attention", (q, k, v), out, backward_fn)
