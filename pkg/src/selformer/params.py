"""Parameter initialization helpers and the shared layer-norm bundle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, parameter


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws, redrawn until every entry lies within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def weight(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return parameter(truncated_normal(rng, shape, std))


def zeros(shape) -> Tensor:
    return parameter(np.zeros(shape))


def ones(shape) -> Tensor:
    return parameter(np.ones(shape))


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, dim: int) -> "LayerNormParams":
        return cls(gain=ones(dim), bias=zeros(dim))

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.bias", self.bias)]
