"""Full classifier assembly: 3x3 stem, strided patch embedding, stacked
selective transformer groups (one kernel-selective block followed by token-
selective blocks), and a pooled layer-norm + fully-connected head. Also owns
parameter counting and the checkpoint container.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ksa import KsaTrace, KstbParams, kstb_forward
from .params import LayerNormParams, weight, zeros
from .tensor import ConvSpec, Tensor, ops
from .tsa import SelectiveAttentionTrace, TstbParams, tstb_forward

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference geometry."""

    class_count: int
    bands: int = 30
    patch_size: int = 10
    embed_dim: int = 128
    token_patch: int = 2
    heads: int = 8
    groups: int = 4
    select_rate: float = 0.8
    stg_count: int = 2
    tstb_per_stg: int = 3
    ffn_ratio: int = 1
    head_mode: str = "mean"   # "mean" pools spatially; "center" reads one cell

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.bands < 1 or self.patch_size < 1:
            raise ValueError("bands and patch_size must be positive")
        if self.patch_size % self.token_patch:
            raise ValueError(
                f"patch_size {self.patch_size} not divisible by token_patch {self.token_patch}"
            )
        if self.embed_dim % 2:
            raise ValueError(f"embed_dim must be even, got {self.embed_dim}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if (self.embed_dim // self.heads) % self.groups:
            raise ValueError(
                f"head width {self.embed_dim // self.heads} not divisible by "
                f"groups {self.groups}"
            )
        if not 0.0 < self.select_rate <= 1.0:
            raise ValueError(f"select_rate {self.select_rate} outside (0, 1]")
        if self.stg_count < 1 or self.tstb_per_stg < 0 or self.ffn_ratio < 1:
            raise ValueError("stg_count >= 1, tstb_per_stg >= 0, ffn_ratio >= 1 required")
        if self.head_mode not in ("mean", "center"):
            raise ValueError(f"head_mode must be 'mean' or 'center', got {self.head_mode!r}")

    @property
    def grid(self) -> int:
        return self.patch_size // self.token_patch

    @classmethod
    def tiny(cls, class_count: int = 3) -> "ModelConfig":
        """Desk-scale geometry used by gradient checks."""
        return cls(
            class_count=class_count, bands=4, patch_size=4, embed_dim=8,
            token_patch=2, heads=2, groups=2, select_rate=0.5,
            stg_count=1, tstb_per_stg=1,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class StgParams:
    """One selective transformer group: a kernel block then token blocks."""

    kstb: KstbParams
    tstbs: list[TstbParams]

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = self.kstb.parameters(f"{prefix}.kstb")
        for i, block in enumerate(self.tstbs):
            out += block.parameters(f"{prefix}.tstb{i}")
        return out


@dataclass
class ModelParams:
    stem_w: Tensor
    stem_b: Tensor
    embed_w: Tensor
    embed_b: Tensor
    stgs: list[StgParams]
    head_ln: LayerNormParams
    head_w: Tensor
    head_b: Tensor

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [
            ("stem.w", self.stem_w), ("stem.b", self.stem_b),
            ("embed.w", self.embed_w), ("embed.b", self.embed_b),
        ]
        for i, stg in enumerate(self.stgs):
            out += stg.parameters(f"stg{i}")
        out += self.head_ln.parameters("head.ln")
        out += [("head.fc_w", self.head_w), ("head.fc_b", self.head_b)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.parameters()]


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    c = config.embed_dim
    t = config.token_patch
    stgs = []
    for _ in range(config.stg_count):
        kstb = KstbParams.create(c, config.ffn_ratio, rng)
        tstbs = [
            TstbParams.create(c, config.heads, config.groups, config.select_rate,
                              config.ffn_ratio, rng)
            for _ in range(config.tstb_per_stg)
        ]
        stgs.append(StgParams(kstb=kstb, tstbs=tstbs))
    return ModelParams(
        stem_w=weight(rng, (c, config.bands, 3, 3)),
        stem_b=zeros(c),
        embed_w=weight(rng, (c, c, t, t)),
        embed_b=zeros(c),
        stgs=stgs,
        head_ln=LayerNormParams.create(c),
        head_w=weight(rng, (c, config.class_count)),
        head_b=zeros(config.class_count),
    )


@dataclass
class ModelTrace:
    """Per-forward selection records: one kernel trace per kernel block, one
    list of head traces per token block, in network order."""

    kernel: list[KsaTrace] = field(default_factory=list)
    attention: list[list[SelectiveAttentionTrace]] = field(default_factory=list)


def forward_features(batch: Tensor, params: ModelParams, config: ModelConfig,
                     trace: bool = False):
    """Feature map ``(B, C, grid, grid)`` after the stem, patch embedding and
    every selective transformer group."""
    if batch.ndim != 4:
        raise ValueError(f"expected batched input (B, bands, w, w), got shape {batch.shape}")
    if batch.shape[1] != config.bands:
        raise ValueError(f"input has {batch.shape[1]} bands but config expects {config.bands}")
    if batch.shape[2] != config.patch_size or batch.shape[3] != config.patch_size:
        raise ValueError(
            f"input patch is {batch.shape[2]}x{batch.shape[3]} but config expects "
            f"{config.patch_size}x{config.patch_size}"
        )
    x = ops.conv2d(batch, params.stem_w, params.stem_b, ConvSpec.same((3, 3)))
    x = ops.conv2d(
        x, params.embed_w, params.embed_b,
        ConvSpec.strided((config.token_patch,) * 2, config.token_patch),
    )
    record = ModelTrace()
    for stg in params.stgs:
        if trace:
            x, kernel_trace = kstb_forward(x, stg.kstb, trace=True)
            record.kernel.append(kernel_trace)
        else:
            x = kstb_forward(x, stg.kstb)
        for block in stg.tstbs:
            if trace:
                x, head_traces = tstb_forward(x, block, trace=True)
                record.attention.append(head_traces)
            else:
                x = tstb_forward(x, block)
    return (x, record) if trace else x


def head_logits(features: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    if config.head_mode == "mean":
        pooled = ops.global_avg_pool(features)
    else:
        row = (features.shape[-2] - 1) // 2
        col = (features.shape[-1] - 1) // 2
        cell = ops.narrow(ops.narrow(features, -2, row, 1), -1, col, 1)
        pooled = ops.reshape(cell, features.shape[:-2])
    normed = ops.layer_norm(pooled, params.head_ln.gain, params.head_ln.bias, axis=-1)
    return ops.fully_connected(normed, params.head_w, params.head_b)


def forward(batch: Tensor, params: ModelParams, config: ModelConfig, trace: bool = False):
    """Class logits ``(B, class_count)`` for a batch of band-reduced patches."""
    features = forward_features(batch, params, config, trace=trace)
    record = None
    if trace:
        features, record = features
    logits = head_logits(features, params, config)
    return (logits, record) if trace else logits


def count_parameters(params: ModelParams) -> int:
    """Exact number of scalar learnables."""
    return int(sum(t.size for t in params.tensors()))


# ---------------------------------------------------------------------------
# checkpoint container: one JSON header line, then the raw little-endian
# tensor payload in declaration order
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    named = params.parameters()
    tensors = []
    offset = 0
    payload = []
    for name, t in named:
        arr = np.ascontiguousarray(t.data)
        code = arr.dtype.newbyteorder("<").str
        tensors.append(
            {"name": name, "offset": offset, "shape": list(arr.shape), "dtype": code}
        )
        raw = arr.astype(code, copy=False).tobytes()
        payload.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "tensors": tensors,
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    blob = Path(path).read_bytes()
    newline = blob.index(b"\n")
    header = json.loads(blob[:newline].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    params = init_model(config, seed=0)
    base = newline + 1
    named = dict(params.parameters())
    expected = [name for name, _ in params.parameters()]
    stored = [entry["name"] for entry in header["tensors"]]
    if stored != expected:
        raise ValueError("checkpoint tensor list does not match this model layout")
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        target = named[entry["name"]]
        if tuple(target.data.shape) != shape:
            raise ValueError(
                f"checkpoint tensor {entry['name']} has shape {shape}, "
                f"model expects {target.data.shape}"
            )
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            blob, dtype=np.dtype(entry["dtype"]), count=count, offset=base + entry["offset"]
        ).reshape(shape)
        target.data = arr.copy()
    return params, config
