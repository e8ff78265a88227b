"""Dense tensors with a per-step reverse-mode tape."""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from typing import Any

import numpy as np

BackwardFn = Callable[[np.ndarray], None]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""

    pass


class NumericError(ArithmeticError):
    """Raised when an operation receives or produces non-finite values."""

    pass


class Tensor:
    """A dense float tensor that can take part in reverse-mode differentiation.

    ``grad`` is allocated (zero-filled) iff ``requires_grad``. Values are treated as
    immutable once the tensor is part of a recorded graph; only parameters are updated
    in place, between steps, by the optimizer.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_touched")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: Any = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if array.dtype not in _FLOAT_DTYPES:
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(array) if self.requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._touched = False

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)
        self._touched = False

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{req}{nm})"


class _Tape(threading.local):
    """Thread-local record of operations in creation order."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.enabled = True


_tape = _Tape()


def is_recording() -> bool:
    return _tape.enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (sampling and evaluation)."""
    previous = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = previous


def graph_size() -> int:
    return len(_tape.nodes)


def clear_graph() -> None:
    for node in _tape.nodes:
        node._parents = ()
        node._backward = None
        node._touched = False
    _tape.nodes.clear()


def record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording it on the tape when any parent needs a gradient."""
    needs_grad = _tape.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        out._parents = parents
        out._backward = backward_fn
        _tape.nodes.append(out)
    return out


def accumulate(tensor: Tensor, contribution: np.ndarray) -> None:
    """Add ``contribution`` into ``tensor.grad`` if the tensor tracks gradients."""
    if not tensor.requires_grad or tensor.grad is None:
        return
    if contribution.shape != tensor.grad.shape:
        raise ShapeError(
            f"gradient shape {contribution.shape} does not match tensor shape {tensor.grad.shape}"
        )
    np.add(tensor.grad, contribution, out=tensor.grad, casting="unsafe")
    tensor._touched = True


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into every reachable tensor, then free the graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss.grad is None:
        clear_graph()
        return
    loss.grad += 1
    loss._touched = True
    # Record order is topological, so reverse record order visits each node after
    # every consumer of it has pushed its contribution.
    for node in reversed(_tape.nodes):
        if node._touched and node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    clear_graph()
