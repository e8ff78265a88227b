"""Central finite-difference gradient checks."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def analytic_gradients(loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.zero_grad()
    backward(loss_fn())
    return [np.array(t.grad, copy=True) for t in inputs]


def numerical_gradient(
    loss_fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-5
) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every element of ``tensor``.

    Perturbs ``tensor.data`` in place and restores it afterwards.
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            upper = float(loss_fn().data)
            flat[i] = original - eps
            lower = float(loss_fn().data)
            flat[i] = original
            grad[i] = (upper - lower) / (2.0 * eps)
    return grad.reshape(tensor.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / scale


def check_gradients(
    loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5
) -> float:
    """Return the worst relative error between analytic and numerical gradients.

    ``loss_fn`` must be deterministic (fixed seeds) and every input must be a 64-bit
    leaf with ``requires_grad``.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError(f"gradient checks need float64 inputs, got {t.data.dtype}")
    analytic = analytic_gradients(loss_fn, inputs)
    worst = 0.0
    for t, a in zip(inputs, analytic, strict=True):
        worst = max(worst, relative_error(a, numerical_gradient(loss_fn, t, eps)))
    return worst
