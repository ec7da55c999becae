"""Array container and reverse-mode gradient engine.

Every numeric primitive in this package is a pure function: it returns a fresh
tensor and registers one hand-derived vector-Jacobian product per
differentiable input. Calling :meth:`Tensor.backward` on a scalar result walks
the recorded graph once in reverse topological order and accumulates gradients
into every tensor on a ``requires_grad`` path. There is no graph compiler and
no operator fusion; the tape is just closures.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True


class NumericsError(RuntimeError):
    """An iterative numeric procedure failed to meet its tolerance."""


def set_default_dtype(dtype) -> None:
    """Set the float width used for newly created tensors.

    float64 is the default and is required by the gradient-check and oracle
    test suites; float32 halves memory and speeds up large training runs.
    """
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Context manager that suppresses graph recording (cheap inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense n-dimensional real array with optional gradient tracking.

    ``data`` is a row-major numpy array and must be treated as immutable once
    the tensor has been consumed by an op; the only sanctioned in-place
    mutation is an optimizer updating leaf parameters between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data with no graph history."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        With no argument the tensor must hold a single element (a loss) and is
        seeded with gradient 1.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without a seed needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(
                    f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}"
                )
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(_topo_order(self)):
            if node._vjps is None or node.grad is None:
                continue
            out_grad = node.grad
            for parent, vjp in zip(node._parents, node._vjps):
                if parent.requires_grad and vjp is not None:
                    contribution = vjp(out_grad)
                    if parent.grad is None:
                        parent.grad = contribution
                    else:
                        parent.grad = parent.grad + contribution

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def parameter(data) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


def build(data: np.ndarray, parents: tuple[Tensor, ...], vjps: tuple) -> Tensor:
    """Assemble an op result, recording VJP closures when gradients are live."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the pre-broadcast shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(
        axis for axis, extent in enumerate(shape) if extent == 1 and grad.shape[axis] != 1
    )
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order
