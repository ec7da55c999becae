"""Self-contained differentiable tensor core: the array type, the gradient
tape, convolutions, and every primitive the model layers are built from."""

from .core import (
    NumericsError,
    Tensor,
    build,
    get_default_dtype,
    grad_enabled,
    no_grad,
    parameter,
    set_default_dtype,
    unbroadcast,
    zero_grads,
)
from .conv import ConvSpec, conv2d, conv3d
from . import ops

__all__ = [
    "ConvSpec",
    "NumericsError",
    "Tensor",
    "build",
    "conv2d",
    "conv3d",
    "get_default_dtype",
    "grad_enabled",
    "no_grad",
    "ops",
    "parameter",
    "set_default_dtype",
    "unbroadcast",
    "zero_grads",
]
