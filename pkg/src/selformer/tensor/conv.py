"""Grouped, dilated, strided cross-correlation in 2-D and 3-D.

Inputs are ``(C, *spatial)`` or batched ``(B, C, *spatial)``; weights follow
the ``(C_out, C_in/groups, *kernel)`` layout, so a depthwise filter bank is
``(C, 1, *kernel)`` with ``groups=C``. The forward loops over kernel taps and
does one strided-slice einsum per tap, which keeps the hand-written input and
weight gradients symmetric with the forward pass.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import Tensor, build


def _as_dims(value, nd: int, name: str) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * nd
    dims = tuple(int(v) for v in value)
    if len(dims) != nd:
        raise ValueError(f"{name} {dims} must have {nd} entries")
    return dims


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: kernel, dilation, zero padding, stride, groups."""

    kernel: tuple[int, ...]
    dilation: tuple[int, ...]
    padding: tuple[int, ...]
    stride: tuple[int, ...]
    groups: int = 1

    def __post_init__(self):
        nd = len(self.kernel)
        for name in ("dilation", "padding", "stride"):
            if len(getattr(self, name)) != nd:
                raise ValueError(f"{name} rank != kernel rank {nd}")
        if any(k < 1 for k in self.kernel) or any(d < 1 for d in self.dilation):
            raise ValueError(f"kernel {self.kernel} / dilation {self.dilation} must be >= 1")
        if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise ValueError(f"stride {self.stride} / padding {self.padding} out of range")
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")
        for k, p in zip(self.kernel, self.padding):
            if p > 0 and k % 2 == 0:
                raise ValueError(f"even kernel extent {k} cannot be zero-padded symmetrically")

    @staticmethod
    def same(kernel, dilation=1, groups: int = 1) -> "ConvSpec":
        """Stride-1 spec whose padding preserves spatial extents (odd kernels only)."""
        k = tuple(kernel) if not isinstance(kernel, int) else (kernel,)
        nd = len(k)
        d = _as_dims(dilation, nd, "dilation")
        for ki in k:
            if ki % 2 == 0:
                raise ValueError(f"'same' padding needs odd kernels, got {k}")
        pad = tuple(di * (ki - 1) // 2 for ki, di in zip(k, d))
        return ConvSpec(kernel=k, dilation=d, padding=pad, stride=(1,) * nd, groups=groups)

    @staticmethod
    def strided(kernel, stride, groups: int = 1) -> "ConvSpec":
        """Unpadded spec with an explicit stride (patch embedding and friends)."""
        k = tuple(kernel) if not isinstance(kernel, int) else (kernel,)
        nd = len(k)
        s = _as_dims(stride, nd, "stride")
        return ConvSpec(kernel=k, dilation=(1,) * nd, padding=(0,) * nd, stride=s, groups=groups)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlate ``(B?, C_in, H, W)`` with ``(C_out, C_in/groups, kh, kw)``."""
    return _conv(x, weight, bias, spec, nd=2)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlate ``(B?, C_in, D, H, W)`` with ``(C_out, C_in/groups, kd, kh, kw)``."""
    return _conv(x, weight, bias, spec, nd=3)


def _out_extent(n: int, k: int, dilation: int, pad: int, stride: int) -> int:
    effective = dilation * (k - 1) + 1
    out = (n + 2 * pad - effective) // stride + 1
    if out < 1:
        raise ValueError(
            f"spatial extent {n} too small for kernel {k} (dilation {dilation}, pad {pad})"
        )
    return out


def _conv(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec, nd: int) -> Tensor:
    if len(spec.kernel) != nd:
        raise ValueError(f"spec kernel rank {len(spec.kernel)} != {nd}")
    xd, wd = x.data, weight.data
    if xd.ndim not in (nd + 1, nd + 2):
        raise ValueError(f"input must have {nd + 1} or {nd + 2} dims, got shape {xd.shape}")
    if wd.ndim != nd + 2:
        raise ValueError(f"weight must have {nd + 2} dims, got shape {wd.shape}")
    if tuple(wd.shape[2:]) != spec.kernel:
        raise ValueError(f"weight kernel {wd.shape[2:]} != spec kernel {spec.kernel}")
    batched = xd.ndim == nd + 2
    xb = xd if batched else xd[None]
    n_batch, c_in = xb.shape[0], xb.shape[1]
    c_out = wd.shape[0]
    g = spec.groups
    if c_in % g or c_out % g:
        raise ValueError(f"channels in={c_in} out={c_out} not divisible by groups={g}")
    if wd.shape[1] * g != c_in:
        raise ValueError(
            f"input has {c_in} channels but weight {wd.shape} with groups={g} "
            f"expects {wd.shape[1] * g}"
        )
    if bias is not None and bias.data.shape != (c_out,):
        raise ValueError(f"bias shape {bias.data.shape} != ({c_out},)")

    cing, coutg = c_in // g, c_out // g
    spatial = xb.shape[2:]
    out_sp = tuple(
        _out_extent(n, k, d, p, s)
        for n, k, d, p, s in zip(spatial, spec.kernel, spec.dilation, spec.padding, spec.stride)
    )
    widths = [(0, 0), (0, 0)] + [(p, p) for p in spec.padding]
    xp = np.pad(xb, widths) if any(spec.padding) else xb
    xg = xp.reshape(n_batch, g, cing, *xp.shape[2:])
    wg = wd.reshape(g, coutg, cing, *spec.kernel)

    taps = list(itertools.product(*(range(k) for k in spec.kernel)))
    sp = "zyx"[-nd:]
    sub_fwd = f"bgc{sp},goc->bgo{sp}"
    sub_gw = f"bgo{sp},bgc{sp}->goc"
    sub_gx = f"bgo{sp},goc->bgc{sp}"

    def tap_slices(tap):
        return tuple(
            slice(t * d, t * d + s * (o - 1) + 1, s)
            for t, d, s, o in zip(tap, spec.dilation, spec.stride, out_sp)
        )

    out_g = np.zeros((n_batch, g, coutg, *out_sp), dtype=xb.dtype)
    for tap in taps:
        window = xg[(slice(None), slice(None), slice(None), *tap_slices(tap))]
        out_g += np.einsum(sub_fwd, window, wg[(..., *tap)])
    out = out_g.reshape(n_batch, c_out, *out_sp)
    if bias is not None:
        out = out + bias.data.reshape((c_out,) + (1,) * nd)
    if not batched:
        out = out[0]

    cache: dict = {}

    def grads(grad_out: np.ndarray):
        if cache.get("seed") is grad_out:
            return cache["grads"]
        go = grad_out if batched else grad_out[None]
        gg = go.reshape(n_batch, g, coutg, *out_sp)
        gw = np.zeros_like(wg)
        gxg = np.zeros_like(xg)
        for tap in taps:
            sl = (slice(None), slice(None), slice(None), *tap_slices(tap))
            gw[(..., *tap)] += np.einsum(sub_gw, gg, xg[sl])
            gxg[sl] += np.einsum(sub_gx, gg, wg[(..., *tap)])
        gxp = gxg.reshape(xp.shape)
        if any(spec.padding):
            trim = (slice(None), slice(None)) + tuple(
                slice(p, p + n) for p, n in zip(spec.padding, spatial)
            )
            gx = gxp[trim]
        else:
            gx = gxp
        if not batched:
            gx = gx[0]
        gb = go.sum(axis=(0, *range(2, nd + 2))) if bias is not None else None
        cache["seed"] = grad_out
        cache["grads"] = (gx, gw.reshape(wd.shape), gb)
        return cache["grads"]

    parents = [x, weight]
    vjps = [lambda gr: grads(gr)[0], lambda gr: grads(gr)[1]]
    if bias is not None:
        parents.append(bias)
        vjps.append(lambda gr: grads(gr)[2])
    return build(out, tuple(parents), tuple(vjps))
