"""Token-selective multi-head attention over grouped spatial-spectral tokens.

Each head's channel slice is split into groups, lifted to query/key/value by a
pointwise 3-D convolution (groups -> 3x groups) followed by a depthwise 1x3x3
convolution, flattened to (H*W*groups) tokens, and attended with per-row top-k
masking of the score matrix before the softmax.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ksa import FfnParams, ffn_forward, _with_batch
from .params import LayerNormParams, weight, zeros
from .tensor import ConvSpec, Tensor, ops

_POINTWISE2D = ConvSpec.same((1, 1))
_POINTWISE3D = ConvSpec.same((1, 1, 1))


@dataclass
class TsaParams:
    """Per-head token-mixing weights plus the shared output projection.

    Dimension contract: embed C divisible by heads h, head width d = C/h
    divisible by groups g, per-group channels c = d/g; attention scores are
    scaled by 1/sqrt(d).
    """

    embed: int
    heads: int
    groups: int
    select_rate: float
    pconv_w: list[Tensor]    # per head (3g, g, 1, 1, 1)
    pconv_b: list[Tensor]    # per head (3g,)
    dwconv_w: list[Tensor]   # per head (3g, 1, 1, 3, 3)
    out_w: Tensor            # (C, C, 1, 1)
    out_b: Tensor            # (C,)

    @classmethod
    def create(cls, embed: int, heads: int, groups: int, select_rate: float,
               rng: np.random.Generator) -> "TsaParams":
        if embed % heads:
            raise ValueError(f"embed {embed} not divisible by heads {heads}")
        head_dim = embed // heads
        if head_dim % groups:
            raise ValueError(
                f"head width {head_dim} (= {embed}/{heads}) not divisible by groups {groups}"
            )
        if not 0.0 < select_rate <= 1.0:
            raise ValueError(f"selection rate {select_rate} outside (0, 1]")
        return cls(
            embed=embed,
            heads=heads,
            groups=groups,
            select_rate=select_rate,
            pconv_w=[weight(rng, (3 * groups, groups, 1, 1, 1)) for _ in range(heads)],
            pconv_b=[zeros(3 * groups) for _ in range(heads)],
            dwconv_w=[weight(rng, (3 * groups, 1, 1, 3, 3)) for _ in range(heads)],
            out_w=weight(rng, (embed, embed, 1, 1)),
            out_b=zeros(embed),
        )

    @property
    def head_dim(self) -> int:
        return self.embed // self.heads

    def parameters(self, prefix: str = "tsa") -> list[tuple[str, Tensor]]:
        out = []
        for i in range(self.heads):
            out.append((f"{prefix}.head{i}.pconv_w", self.pconv_w[i]))
            out.append((f"{prefix}.head{i}.pconv_b", self.pconv_b[i]))
            out.append((f"{prefix}.head{i}.dwconv_w", self.dwconv_w[i]))
        out.append((f"{prefix}.out_w", self.out_w))
        out.append((f"{prefix}.out_b", self.out_b))
        return out


@dataclass
class SelectiveAttentionTrace:
    """Dense score matrix and the boolean retained mask for one head."""

    head: int
    dense: np.ndarray      # (T, T) scores before masking
    retained: np.ndarray   # (T, T) bool, True where the entry survived top-k

    @property
    def tokens(self) -> int:
        return self.dense.shape[0]


def tsa_forward(p_in: Tensor, params: TsaParams, trace: bool = False):
    """Token-selective attention over ``(B?, C, H, W)``.

    Per head: group the channel slice, build Q/K/V with the 3-D convolutions,
    flatten to tokens ordered (group, row, column), score, keep the top
    ceil(k*T) entries per row, softmax, mix values, and add the head's input
    slice. Heads are concatenated and passed through the 1x1 output
    projection. Traces record the first batch element per head.
    """
    xb, squeeze = _with_batch(p_in)
    n_batch, c_embed, height, width = xb.shape
    if c_embed != params.embed:
        raise ValueError(f"input has {c_embed} channels, parameters expect {params.embed}")
    heads, groups = params.heads, params.groups
    head_dim = params.head_dim
    per_group = head_dim // groups
    tokens = height * width * groups
    inv_scale = 1.0 / math.sqrt(head_dim)

    head_outs = []
    records: list[SelectiveAttentionTrace] = []
    for i in range(heads):
        head_slice = ops.narrow(xb, -3, i * head_dim, head_dim)
        grouped = ops.reshape(head_slice, (n_batch, groups, per_group, height, width))
        mixed = ops.conv3d(grouped, params.pconv_w[i], params.pconv_b[i], _POINTWISE3D)
        spatial = ops.conv3d(
            mixed, params.dwconv_w[i], None, ConvSpec.same((1, 3, 3), groups=3 * groups)
        )

        def to_tokens(block: Tensor) -> Tensor:
            return ops.reshape(
                ops.transpose(block, (0, 1, 3, 4, 2)), (n_batch, tokens, per_group)
            )

        queries = to_tokens(ops.narrow(spatial, -4, 0, groups))
        keys = to_tokens(ops.narrow(spatial, -4, groups, groups))
        values = to_tokens(ops.narrow(spatial, -4, 2 * groups, groups))

        scores = ops.scale(ops.matmul(queries, ops.transpose(keys)), inv_scale)
        kept = ops.topk_row_threshold(scores, params.select_rate)
        attention = ops.softmax_rows(kept)
        mixed_values = ops.matmul(attention, values)
        back = ops.reshape(
            ops.transpose(
                ops.reshape(mixed_values, (n_batch, groups, height, width, per_group)),
                (0, 1, 4, 2, 3),
            ),
            (n_batch, head_dim, height, width),
        )
        head_outs.append(ops.add(head_slice, back))
        if trace:
            records.append(
                SelectiveAttentionTrace(
                    head=i,
                    dense=scores.data[0].copy(),
                    retained=np.isfinite(kept.data[0]),
                )
            )

    merged = ops.concat_channels(head_outs)
    out = ops.conv2d(merged, params.out_w, params.out_b, _POINTWISE2D)
    result = ops.reshape(out, out.shape[1:]) if squeeze else out
    return (result, records) if trace else result


@dataclass
class TstbParams:
    """Token-selective block: pre-norm attention plus pre-norm feed-forward."""

    tsa: TsaParams
    ffn: FfnParams
    ln1: LayerNormParams
    ln2: LayerNormParams

    @classmethod
    def create(cls, embed: int, heads: int, groups: int, select_rate: float,
               ratio: int, rng: np.random.Generator) -> "TstbParams":
        return cls(
            tsa=TsaParams.create(embed, heads, groups, select_rate, rng),
            ffn=FfnParams.create(embed, ratio, rng),
            ln1=LayerNormParams.create(embed),
            ln2=LayerNormParams.create(embed),
        )

    def parameters(self, prefix: str = "tstb") -> list[tuple[str, Tensor]]:
        out = self.tsa.parameters(f"{prefix}.tsa") + self.ffn.parameters(f"{prefix}.ffn")
        out += self.ln1.parameters(f"{prefix}.ln1") + self.ln2.parameters(f"{prefix}.ln2")
        return out


def tstb_forward(x: Tensor, p: TstbParams, trace: bool = False):
    normed = ops.layer_norm(x, p.ln1.gain, p.ln1.bias)
    attended = tsa_forward(normed, p.tsa, trace=trace)
    records = None
    if trace:
        attended, records = attended
    mid = ops.add(x, attended)
    normed2 = ops.layer_norm(mid, p.ln2.gain, p.ln2.bias)
    out = ops.add(mid, ffn_forward(normed2, p.ffn))
    return (out, records) if trace else out


# ---------------------------------------------------------------------------
# trace container: per record an 8-byte length, a JSON header, the dense
# matrix as raw little-endian float64, then the mask as packed bits
# ---------------------------------------------------------------------------

def write_attention_traces(traces, path, first_head_only: bool = False) -> None:
    selected = [t for t in traces if not first_head_only or t.head == 0]
    with Path(path).open("wb") as fh:
        for t in selected:
            dense = np.ascontiguousarray(t.dense, dtype="<f8")
            mask_bits = np.packbits(t.retained.astype(np.uint8).ravel())
            header = json.dumps(
                {
                    "head": int(t.head),
                    "shape": [int(s) for s in t.dense.shape],
                    "dtype": "<f8",
                    "dense_bytes": int(dense.nbytes),
                    "mask_bytes": int(mask_bits.nbytes),
                }
            ).encode("utf-8")
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(dense.tobytes())
            fh.write(mask_bits.tobytes())


def read_attention_traces(path) -> list[SelectiveAttentionTrace]:
    out = []
    blob = Path(path).read_bytes()
    cursor = 0
    while cursor < len(blob):
        (header_len,) = struct.unpack_from("<Q", blob, cursor)
        cursor += 8
        header = json.loads(blob[cursor:cursor + header_len].decode("utf-8"))
        cursor += header_len
        shape = tuple(header["shape"])
        dense = np.frombuffer(
            blob, dtype="<f8", count=shape[0] * shape[1], offset=cursor
        ).reshape(shape)
        cursor += header["dense_bytes"]
        packed = np.frombuffer(blob, dtype=np.uint8, count=header["mask_bytes"], offset=cursor)
        cursor += header["mask_bytes"]
        mask = np.unpackbits(packed)[: shape[0] * shape[1]].reshape(shape).astype(bool)
        out.append(SelectiveAttentionTrace(head=header["head"], dense=dense.copy(), retained=mask))
    return out
