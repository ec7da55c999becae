"""Differentiable primitives: arithmetic, activations, pooling, normalization,
attention-row utilities, and shape plumbing.

Feature maps are ``(..., C, H, W)`` with the channel axis at ``-3``; token
matrices put rows on the last axis. Broadcasting follows numpy; gradients of
broadcasted operands are summed back to their original shapes.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .core import Tensor, build, unbroadcast
from .conv import ConvSpec, conv2d, conv3d  # noqa: F401  (re-exported)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return build(
        a.data + b.data,
        (a, b),
        (lambda g: unbroadcast(g, a.data.shape), lambda g: unbroadcast(g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return build(
        a.data * b.data,
        (a, b),
        (
            lambda g: unbroadcast(g * b.data, a.data.shape),
            lambda g: unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(x, factor: float) -> Tensor:
    x = _t(x)
    factor = float(factor)
    return build(x.data * factor, (x,), (lambda g: g * factor,))


def copy(x) -> Tensor:
    x = _t(x)
    return build(x.data.copy(), (x,), (lambda g: g,))


def sum_all(x) -> Tensor:
    """Reduce to a scalar; the usual way to seed a backward pass."""
    x = _t(x)
    shape = x.data.shape
    return build(
        np.asarray(x.data.sum()), (x,), (lambda g: np.broadcast_to(g, shape).copy(),)
    )


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = _t(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    return build(out, (x,), (lambda g: g * out * (1.0 - out),))


def gelu(x) -> Tensor:
    """exact-erf form: 0.5 * x * (1 + erf(x / sqrt(2)))"""
    x = _t(x)
    d = x.data
    cdf_term = erf(d * _INV_SQRT2)
    out = 0.5 * d * (1.0 + cdf_term)

    def vjp(g):
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT_2PI
        return g * (0.5 * (1.0 + cdf_term) + d * pdf)

    return build(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def channel_pool(x, mode: str) -> Tensor:
    """Squeeze the channel axis of ``(..., C, H, W)`` to 1 by mean or max."""
    x = _t(x)
    d = x.data
    if d.ndim < 3:
        raise ValueError(f"channel_pool needs (..., C, H, W), got shape {d.shape}")
    axis = d.ndim - 3
    if mode == "avg":
        n = d.shape[axis]
        out = d.mean(axis=axis, keepdims=True)
        return build(out, (x,), (lambda g: np.broadcast_to(g / n, d.shape),))
    if mode == "max":
        out = d.max(axis=axis, keepdims=True)
        winner = np.expand_dims(np.argmax(d, axis=axis), axis)

        def vjp(g):
            gx = np.zeros_like(d)
            np.put_along_axis(gx, winner, g, axis=axis)
            return gx

        return build(out, (x,), (vjp,))
    raise ValueError(f"unknown channel_pool mode {mode!r}; use 'avg' or 'max'")


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing spatial axes: ``(..., C, H, W) -> (..., C)``."""
    x = _t(x)
    d = x.data
    if d.ndim < 3:
        raise ValueError(f"global_avg_pool needs (..., C, H, W), got shape {d.shape}")
    n = d.shape[-1] * d.shape[-2]
    out = d.mean(axis=(-1, -2))
    return build(
        out, (x,), (lambda g: np.broadcast_to(g[..., None, None] / n, d.shape).copy(),)
    )


# ---------------------------------------------------------------------------
# attention-row utilities
# ---------------------------------------------------------------------------

def softmax_rows(x) -> Tensor:
    """Row softmax along the last axis; ``-inf`` entries map to exactly 0.

    A row with no finite entry is rejected: it would mean an upstream
    selection kept nothing, which the top-k op never does.
    """
    x = _t(x)
    d = x.data
    if np.isneginf(d).all(axis=-1).any():
        raise ValueError("softmax_rows: a row has no finite entries")
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=-1, keepdims=True))

    return build(s, (x,), (vjp,))


def retained_count(k: float, n: int) -> int:
    """ceil(k*n), guarded so binary-float k never rounds an exact product up."""
    if not 0.0 < k <= 1.0:
        raise ValueError(f"selection rate k={k} outside (0, 1]")
    return min(n, max(1, math.ceil(k * n - 1e-12)))


def topk_row_mask(data: np.ndarray, k: float) -> np.ndarray:
    """Boolean mask of the ceil(k*N) largest entries per row, ties broken by
    lowest column index."""
    n = data.shape[-1]
    m = retained_count(k, n)
    if m >= n:
        return np.ones(data.shape, dtype=bool)
    order = np.argsort(-data, axis=-1, kind="stable")
    mask = np.zeros(data.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :m], True, axis=-1)
    return mask


def topk_row_threshold(x, k: float) -> Tensor:
    """Keep the top ceil(k*N) entries of each row, set the rest to ``-inf``.

    Retained entries keep their values; the mask is a constant in the backward
    pass, so gradient flows only through retained positions. ``k=1`` is an
    exact copy.
    """
    x = _t(x)
    d = x.data
    if d.ndim < 1:
        raise ValueError("topk_row_threshold needs at least one axis")
    n = d.shape[-1]
    if retained_count(k, n) >= n:
        return copy(x)
    mask = topk_row_mask(d, k)
    out = np.where(mask, d, -np.inf)
    return build(out, (x,), (lambda g: g * mask,))


# ---------------------------------------------------------------------------
# normalization and dense layers
# ---------------------------------------------------------------------------

def layer_norm(x, gain, bias, axis: int = -3, eps: float = 1e-5) -> Tensor:
    """Normalize along ``axis`` (channels by default), then scale and shift.

    ``gain`` and ``bias`` are vectors matching the normalized extent.
    """
    x, gain, bias = _t(x), _t(gain), _t(bias)
    d = x.data
    ax = axis % d.ndim
    n = d.shape[ax]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ValueError(
            f"layer_norm gain/bias must be ({n},), got {gain.data.shape} / {bias.data.shape}"
        )
    bshape = [1] * d.ndim
    bshape[ax] = n
    gb = gain.data.reshape(bshape)
    mean = d.mean(axis=ax, keepdims=True)
    centered = d - mean
    var = (centered * centered).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gb + bias.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(d.ndim) if i != ax)

    def vjp_x(g):
        gxh = g * gb
        return inv * (
            gxh
            - gxh.mean(axis=ax, keepdims=True)
            - xhat * (gxh * xhat).mean(axis=ax, keepdims=True)
        )

    return build(
        out,
        (x, gain, bias),
        (
            vjp_x,
            lambda g: (g * xhat).sum(axis=reduce_axes),
            lambda g: g.sum(axis=reduce_axes),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp_a(g):
        return unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def vjp_b(g):
        return unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return build(out, (a, b), (vjp_a, vjp_b))


def fully_connected(x, weight, bias=None) -> Tensor:
    """``(..., in) @ (in, out) + (out,)``."""
    x, weight = _t(x), _t(weight)
    d, wd = x.data, weight.data
    if wd.ndim != 2 or d.shape[-1] != wd.shape[0]:
        raise ValueError(
            f"fully_connected: input {d.shape} incompatible with weight {wd.shape}"
        )
    out = d @ wd
    if bias is not None:
        bias = _t(bias)
        if bias.data.shape != (wd.shape[1],):
            raise ValueError(f"bias shape {bias.data.shape} != ({wd.shape[1]},)")
        out = out + bias.data

    def vjp_x(g):
        return g @ wd.T

    def vjp_w(g):
        return d.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])

    parents = [x, weight]
    vjps = [vjp_x, vjp_w]
    if bias is not None:
        parents.append(bias)
        vjps.append(lambda g: g.reshape(-1, wd.shape[1]).sum(axis=0))
    return build(out, tuple(parents), tuple(vjps))


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _t(x)
    src = x.data.shape
    return build(x.data.reshape(shape), (x,), (lambda g: g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    """Permute axes; default swaps the last two (matrix transpose)."""
    x = _t(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(a % x.ndim for a in axes)
    inverse = np.argsort(axes)
    return build(
        np.transpose(x.data, axes), (x,), (lambda g: np.transpose(g, inverse),)
    )


def concat(parts, axis: int) -> Tensor:
    parts = [_t(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis % out.ndim
    offsets = np.cumsum([0] + [p.data.shape[ax] for p in parts])

    def make_vjp(lo, hi):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    vjps = tuple(make_vjp(offsets[i], offsets[i + 1]) for i in range(len(parts)))
    return build(out, tuple(parts), vjps)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    x = _t(x)
    ax = axis % x.ndim
    if start < 0 or start + length > x.data.shape[ax]:
        raise ValueError(
            f"narrow [{start}:{start + length}] out of range for axis {ax} "
            f"of shape {x.data.shape}"
        )
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)
    src_shape = x.data.shape

    def vjp(g):
        gx = np.zeros(src_shape, dtype=g.dtype)
        gx[sl] = g
        return gx

    return build(x.data[sl], (x,), (vjp,))


def concat_channels(parts) -> Tensor:
    """Concatenate feature maps ``(..., C_i, H, W)`` along the channel axis."""
    return concat(parts, axis=-3)


def split_channels(x, chunks: int) -> tuple[Tensor, ...]:
    """Split the channel axis of ``(..., C, H, W)`` into equal chunks."""
    x = _t(x)
    c = x.data.shape[-3]
    if c % chunks:
        raise ValueError(f"cannot split {c} channels into {chunks} equal chunks")
    width = c // chunks
    return tuple(narrow(x, -3, i * width, width) for i in range(chunks))
