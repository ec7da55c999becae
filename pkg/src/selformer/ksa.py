"""Kernel-selective attention: a 3x3 depthwise branch and a dilated 5x5
depthwise branch (11x11 effective receptive field) fused through learned
spatial masks and a paired per-channel branch softmax, applied
multiplicatively to the input. Also home to the shared feed-forward block and
the pre-norm residual wrapper around both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .params import LayerNormParams, weight, zeros
from .tensor import ConvSpec, Tensor, ops

_POINTWISE = ConvSpec.same((1, 1))


@dataclass
class KsaParams:
    """Weights for one kernel-selective attention module over ``c`` channels.

    Depthwise filters carry no bias; channel-mixing 1x1 convolutions and the
    fully connected squeeze do. ``gate1``/``gate2`` are the per-channel logits
    scales of the two-branch softmax, zero-initialized so selection starts at
    an unbiased 50/50.
    """

    dw3: Tensor          # (c, 1, 3, 3)
    dw5: Tensor          # (c, 1, 5, 5), applied with dilation 2
    proj1_w: Tensor      # (c/2, c, 1, 1)
    proj1_b: Tensor
    proj2_w: Tensor
    proj2_b: Tensor
    spatial_w: Tensor    # (2, 2, 1, 1) over [avg; max] pooled maps
    spatial_b: Tensor
    fc_w: Tensor         # (c, c/2)
    fc_b: Tensor
    gate1: Tensor        # (c/2,)
    gate2: Tensor
    fuse_w: Tensor       # (c, c/2, 1, 1)
    fuse_b: Tensor

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator) -> "KsaParams":
        if channels % 2:
            raise ValueError(f"channel count must be even, got {channels}")
        half = channels // 2
        return cls(
            dw3=weight(rng, (channels, 1, 3, 3)),
            dw5=weight(rng, (channels, 1, 5, 5)),
            proj1_w=weight(rng, (half, channels, 1, 1)),
            proj1_b=zeros(half),
            proj2_w=weight(rng, (half, channels, 1, 1)),
            proj2_b=zeros(half),
            spatial_w=weight(rng, (2, 2, 1, 1)),
            spatial_b=zeros(2),
            fc_w=weight(rng, (channels, half)),
            fc_b=zeros(half),
            gate1=zeros(half),
            gate2=zeros(half),
            fuse_w=weight(rng, (channels, half, 1, 1)),
            fuse_b=zeros(channels),
        )

    @property
    def channels(self) -> int:
        return self.dw3.shape[0]

    def parameters(self, prefix: str = "ksa") -> list[tuple[str, Tensor]]:
        names = (
            "dw3", "dw5", "proj1_w", "proj1_b", "proj2_w", "proj2_b",
            "spatial_w", "spatial_b", "fc_w", "fc_b", "gate1", "gate2",
            "fuse_w", "fuse_b",
        )
        return [(f"{prefix}.{n}", getattr(self, n)) for n in names]


@dataclass
class KsaTrace:
    """Detached per-branch selection weights from one forward pass.

    ``branch_weights`` cover the first batch element; ``branch_gates`` keep
    the paired per-channel softmax values for the whole batch.
    """

    branch_weights: list[np.ndarray]   # each (c/2, w, w)
    channel_means: list[np.ndarray]    # spatial mean per channel, each (c/2,)
    spatial_means: list[np.ndarray]    # channel mean per pixel, each (w, w)
    branch_gates: np.ndarray           # (B, c/2, 2)


def write_selection_trace(traces: list[KsaTrace], path) -> None:
    """Serialize branch selection weights as JSON lines, one per branch."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for trace in traces:
            for branch, (means, smap) in enumerate(
                zip(trace.channel_means, trace.spatial_means)
            ):
                record = {
                    "branch": branch,
                    "channel_mean": [float(v) for v in means],
                    "spatial_map": [[float(v) for v in row] for row in smap],
                }
                fh.write(json.dumps(record) + "\n")


def _with_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return ops.reshape(x, (1, *x.shape)), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C, H, W) or (B, C, H, W), got shape {x.shape}")


def ksa_forward(x: Tensor, p: KsaParams, trace: bool = False):
    """Apply receptive-field selection to ``(B?, c, w, w)``.

    Pipeline: depthwise 3x3 -> branch 1 projection; depthwise dilated 5x5 on
    the same features -> branch 2 projection; [avg; max] channel pooling ->
    1x1 conv -> sigmoid spatial masks; global average pool -> fully connected
    -> paired per-channel softmax gates; branch-weighted sum fused by a 1x1
    conv and multiplied elementwise onto the input.
    """
    xb, squeeze = _with_batch(x)
    c = p.channels
    half = c // 2
    if xb.shape[-3] != c:
        raise ValueError(f"input has {xb.shape[-3]} channels, parameters expect {c}")
    n_batch = xb.shape[0]

    local = ops.conv2d(xb, p.dw3, None, ConvSpec.same((3, 3), groups=c))
    branch1 = ops.conv2d(local, p.proj1_w, p.proj1_b, _POINTWISE)
    wide = ops.conv2d(local, p.dw5, None, ConvSpec.same((5, 5), dilation=2, groups=c))
    branch2 = ops.conv2d(wide, p.proj2_w, p.proj2_b, _POINTWISE)
    merged = ops.concat_channels([branch1, branch2])

    pooled = ops.concat_channels(
        [ops.channel_pool(merged, "avg"), ops.channel_pool(merged, "max")]
    )
    premask = ops.conv2d(pooled, p.spatial_w, p.spatial_b, _POINTWISE)
    mask1 = ops.sigmoid(ops.narrow(premask, -3, 0, 1))
    mask2 = ops.sigmoid(ops.narrow(premask, -3, 1, 1))

    descriptor = ops.fully_connected(ops.global_avg_pool(merged), p.fc_w, p.fc_b)
    paired = ops.concat(
        [
            ops.reshape(ops.mul(descriptor, p.gate1), (n_batch, half, 1)),
            ops.reshape(ops.mul(descriptor, p.gate2), (n_batch, half, 1)),
        ],
        axis=-1,
    )
    gates = ops.softmax_rows(paired)
    gate1 = ops.reshape(ops.narrow(gates, -1, 0, 1), (n_batch, half, 1, 1))
    gate2 = ops.reshape(ops.narrow(gates, -1, 1, 1), (n_batch, half, 1, 1))

    weight1 = ops.mul(gate1, mask1)
    weight2 = ops.mul(gate2, mask2)
    weighted = ops.add(ops.mul(weight1, branch1), ops.mul(weight2, branch2))
    selection = ops.conv2d(weighted, p.fuse_w, p.fuse_b, _POINTWISE)
    out = ops.mul(xb, selection)
    result = ops.reshape(out, out.shape[1:]) if squeeze else out
    if not trace:
        return result
    w_arrays = [weight1.data[0].copy(), weight2.data[0].copy()]
    record = KsaTrace(
        branch_weights=w_arrays,
        channel_means=[w.mean(axis=(1, 2)) for w in w_arrays],
        spatial_means=[w.mean(axis=0) for w in w_arrays],
        branch_gates=gates.data.copy(),
    )
    return result, record


@dataclass
class FfnParams:
    """Feed-forward weights: 1x1 expand, depthwise 3x3, GELU, 1x1 contract."""

    fc_in_w: Tensor      # (c*r, c, 1, 1)
    fc_in_b: Tensor
    dw_w: Tensor         # (c*r, 1, 3, 3)
    fc_out_w: Tensor     # (c, c*r, 1, 1)
    fc_out_b: Tensor

    @classmethod
    def create(cls, channels: int, ratio: int, rng: np.random.Generator) -> "FfnParams":
        if ratio < 1:
            raise ValueError(f"expansion ratio must be >= 1, got {ratio}")
        hidden = channels * ratio
        return cls(
            fc_in_w=weight(rng, (hidden, channels, 1, 1)),
            fc_in_b=zeros(hidden),
            dw_w=weight(rng, (hidden, 1, 3, 3)),
            fc_out_w=weight(rng, (channels, hidden, 1, 1)),
            fc_out_b=zeros(channels),
        )

    def parameters(self, prefix: str = "ffn") -> list[tuple[str, Tensor]]:
        names = ("fc_in_w", "fc_in_b", "dw_w", "fc_out_w", "fc_out_b")
        return [(f"{prefix}.{n}", getattr(self, n)) for n in names]


def ffn_forward(x: Tensor, p: FfnParams) -> Tensor:
    hidden = p.dw_w.shape[0]
    expanded = ops.conv2d(x, p.fc_in_w, p.fc_in_b, _POINTWISE)
    spatial = ops.conv2d(expanded, p.dw_w, None, ConvSpec.same((3, 3), groups=hidden))
    return ops.conv2d(ops.gelu(spatial), p.fc_out_w, p.fc_out_b, _POINTWISE)


@dataclass
class KstbParams:
    """Kernel-selective block: pre-norm attention plus pre-norm feed-forward."""

    ksa: KsaParams
    ffn: FfnParams
    ln1: LayerNormParams
    ln2: LayerNormParams

    @classmethod
    def create(cls, channels: int, ratio: int, rng: np.random.Generator) -> "KstbParams":
        return cls(
            ksa=KsaParams.create(channels, rng),
            ffn=FfnParams.create(channels, ratio, rng),
            ln1=LayerNormParams.create(channels),
            ln2=LayerNormParams.create(channels),
        )

    def parameters(self, prefix: str = "kstb") -> list[tuple[str, Tensor]]:
        out = self.ksa.parameters(f"{prefix}.ksa") + self.ffn.parameters(f"{prefix}.ffn")
        out += self.ln1.parameters(f"{prefix}.ln1") + self.ln2.parameters(f"{prefix}.ln2")
        return out


def kstb_forward(x: Tensor, p: KstbParams, trace: bool = False):
    normed = ops.layer_norm(x, p.ln1.gain, p.ln1.bias)
    attended = ksa_forward(normed, p.ksa, trace=trace)
    record = None
    if trace:
        attended, record = attended
    mid = ops.add(x, attended)
    normed2 = ops.layer_norm(mid, p.ln2.gain, p.ln2.bias)
    out = ops.add(mid, ffn_forward(normed2, p.ffn))
    return (out, record) if trace else out
