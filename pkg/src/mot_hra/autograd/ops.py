"""Differentiable primitives.

Shapes are explicit: binary elementwise ops require identical shapes, and the only
implicit expansion is row-wise bias addition (``add_bias``). ``matmul`` accepts a
leading batch stack on the left operand, either against a shared 2-D right operand
(a weight matrix) or against a right operand with the same leading stack.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from .tensor import NumericError, ShapeError, Tensor, accumulate, record

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def constant(value: np.ndarray | float, like: Tensor) -> Tensor:
    """Wrap a value as a non-differentiable tensor with ``like``'s dtype."""
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _as_tensor(value: Tensor | np.ndarray | float, like: Tensor) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value, like)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    shared_rhs = b.ndim == 2
    if not shared_rhs and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if shared_rhs:
                k, n = b.shape
                accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return record(np.matmul(a.data, b.data), (a, b), _bw)


def add(a: Tensor, b: Tensor | np.ndarray) -> Tensor:
    b = _as_tensor(b, a)
    _require_same_shape("add", a, b)

    def _bw(g: np.ndarray) -> None:
        accumulate(a, g)
        accumulate(b, g)

    return record(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b: Tensor | np.ndarray) -> Tensor:
    b = _as_tensor(b, a)
    _require_same_shape("sub", a, b)

    def _bw(g: np.ndarray) -> None:
        accumulate(a, g)
        accumulate(b, -g)

    return record(a.data - b.data, (a, b), _bw)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-wise bias addition: ``bias`` has the last extent of ``x``."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match last extent of {x.shape}")

    def _bw(g: np.ndarray) -> None:
        accumulate(x, g)
        accumulate(bias, g.reshape(-1, bias.shape[0]).sum(axis=0))

    return record(x.data + bias.data, (x, bias), _bw)


def mul(a: Tensor, b: Tensor | np.ndarray) -> Tensor:
    b = _as_tensor(b, a)
    _require_same_shape("mul", a, b)

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            accumulate(a, g * b.data)
        if b.requires_grad:
            accumulate(b, g * a.data)

    return record(a.data * b.data, (a, b), _bw)


def scale(x: Tensor, factor: float) -> Tensor:
    c = x.data.dtype.type(factor)

    def _bw(g: np.ndarray) -> None:
        accumulate(x, g * c)

    return record(x.data * c, (x,), _bw)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_K * (xd + _GELU_C * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def _bw(g: np.ndarray) -> None:
        d_inner = _GELU_K * (1.0 + 3.0 * _GELU_C * xd**2)
        local = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * d_inner
        accumulate(x, g * local)

    return record(out.astype(xd.dtype, copy=False), (x,), _bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g: np.ndarray) -> None:
        accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return record(y, (x,), _bw)


def masked_fill(x: Tensor, allowed: np.ndarray, value: float = -np.inf) -> Tensor:
    """Replace entries where ``allowed`` is False with ``value`` (attention masking).

    ``allowed`` may be any boolean array that broadcasts to ``x``'s shape.
    """
    keep = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)

    def _bw(g: np.ndarray) -> None:
        accumulate(x, np.where(keep, g, 0).astype(g.dtype, copy=False))

    return record(np.where(keep, x.data, x.data.dtype.type(value)), (x,), _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last extent {n}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = g * gain.data
            dx = inv_std * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            accumulate(x, dx)
        if gain.requires_grad:
            accumulate(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            accumulate(bias, g.reshape(-1, n).sum(axis=0))

    return record(out.astype(x.data.dtype, copy=False), (x, gain, bias), _bw)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a ``vocab x d`` table; output shape is ``indices.shape + (d,)``."""
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding indices must be integers, got dtype {idx.dtype}")
    vocab, width = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(
            f"embedding index out of range [0, {vocab}): min={idx.min()} max={idx.max()}"
        )

    def _bw(g: np.ndarray) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, width))
        accumulate(table, gt)

    return record(table.data[idx], (table,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: incompatible shapes {[u.shape for u in tensors]}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0, *sizes])

    def _bw(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:], strict=True):
            if t.requires_grad:
                accumulate(t, np.take(g, np.arange(lo, hi), axis=ax))

    return record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), _bw)


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    key = tuple(index)

    def _bw(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[key] = g
        accumulate(x, full)

    return record(x.data[key], (x,), _bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice the row (second-to-last) axis: token positions in a ``... x T x d`` tensor."""
    return slice_axis(x, start, stop, axis=-2)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape

    def _bw(g: np.ndarray) -> None:
        accumulate(x, g.reshape(original))

    return record(x.data.reshape(tuple(shape)), (x,), _bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    perm = tuple(axes)
    inverse = tuple(np.argsort(perm))

    def _bw(g: np.ndarray) -> None:
        accumulate(x, np.ascontiguousarray(np.transpose(g, inverse)))

    return record(np.ascontiguousarray(np.transpose(x.data, perm)), (x,), _bw)


def expand(x: Tensor, count: int) -> Tensor:
    """Stack ``count`` copies of ``x`` along a new leading axis."""

    def _bw(g: np.ndarray) -> None:
        accumulate(x, g.sum(axis=0))

    return record(np.broadcast_to(x.data, (count, *x.shape)).copy(), (x,), _bw)


def sum_all(x: Tensor) -> Tensor:
    def _bw(g: np.ndarray) -> None:
        accumulate(x, np.full_like(x.data, g.reshape(())))

    return record(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), _bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Summed negative log-likelihood of integer ``targets`` under row-wise softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects n x B logits, got {logits.shape}")
    n, bins = logits.shape
    tgt = np.asarray(targets)
    if tgt.shape != (n,):
        raise ShapeError(f"cross_entropy: targets {tgt.shape} do not match {n} rows")
    if n and (tgt.min() < 0 or tgt.max() >= bins):
        raise IndexError(f"cross_entropy target out of range [0, {bins}): {tgt.min()}..{tgt.max()}")
    if np.isnan(logits.data).any():
        raise NumericError("cross_entropy received NaN logits")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, tgt].sum()

    def _bw(g: np.ndarray) -> None:
        grad = np.exp(log_p)
        grad[rows, tgt] -= 1.0
        accumulate(logits, grad * g.reshape(()))

    return record(np.asarray(loss, dtype=logits.data.dtype), (logits,), _bw)


def mse_weighted(
    pred: Tensor, target: Tensor | np.ndarray, weight: float | np.ndarray
) -> Tensor:
    """``sum(weight * (pred - target)**2)``; ``weight`` is a scalar or a pred-shaped array."""
    tgt = _as_tensor(target, pred)
    _require_same_shape("mse_weighted", pred, tgt)
    w = np.asarray(weight, dtype=pred.data.dtype)
    if w.ndim and w.shape != pred.shape:
        raise ShapeError(f"mse_weighted: weight {w.shape} does not match {pred.shape}")
    diff = pred.data - tgt.data

    def _bw(g: np.ndarray) -> None:
        local = 2.0 * w * diff * g.reshape(())
        if pred.requires_grad:
            accumulate(pred, np.broadcast_to(local, pred.shape).astype(pred.data.dtype))
        if tgt.requires_grad:
            accumulate(tgt, -np.broadcast_to(local, tgt.shape).astype(tgt.data.dtype))

    return record(np.asarray((w * diff * diff).sum(), dtype=pred.data.dtype), (pred, tgt), _bw)


def detach(x: Tensor) -> Tensor:
    """Gradient barrier: same values, never records, so nothing flows back into ``x``."""
    return Tensor(x.data, requires_grad=False, name=x.name)
