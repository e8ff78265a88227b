"""Conditional flow-matching pieces shared by the hand and action generators."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

TIME_SCALE = 1000.0
MAX_PERIOD = 10000.0

VelocityFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class FlowBatch:
    """Noise, time, interpolated state and target velocity for one flow-matching step."""

    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v_star: np.ndarray


def _broadcast_time(t: np.ndarray, like: np.ndarray) -> np.ndarray:
    return np.asarray(t, dtype=np.float64).reshape(-1, *([1] * (like.ndim - 1)))


def make_flow_batch(target: np.ndarray, eps: np.ndarray, t: np.ndarray) -> FlowBatch:
    """``x_t = (1 - t) * eps + t * target`` and ``v* = target - eps``; ``t`` is per sample."""
    target = np.asarray(target, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if target.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match target shape {target.shape}")
    tt = _broadcast_time(t, target)
    return FlowBatch(
        eps=eps,
        t=np.asarray(t, dtype=np.float64).reshape(-1),
        x_t=(1.0 - tt) * eps + tt * target,
        v_star=target - eps,
    )


def draw_flow_batch(
    target: np.ndarray, time_rng: np.random.Generator, noise_rng: np.random.Generator
) -> FlowBatch:
    """``t ~ U(0, 1)`` per sample and ``eps ~ N(0, I)``."""
    t = time_rng.uniform(0.0, 1.0, size=target.shape[0])
    eps = noise_rng.standard_normal(target.shape)
    return make_flow_batch(target, eps, t)


def time_embedding(t: np.ndarray | float, width: int) -> np.ndarray:
    """Sinusoidal features of ``t`` (``len(t) x width``): sines then cosines."""
    times = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(MAX_PERIOD) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = TIME_SCALE * times[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if width % 2:
        emb = np.concatenate([emb, np.zeros((times.shape[0], 1))], axis=1)
    return emb


def cfg_combine(v_cond: np.ndarray, v_uncond: np.ndarray, scale: float) -> np.ndarray:
    """``v_uncond + s * (v_cond - v_uncond)``; at ``s == 1`` ``v_cond`` is returned unchanged."""
    if scale == 1.0:
        return v_cond
    return v_uncond + scale * (v_cond - v_uncond)


def euler_integrate(velocity: VelocityFn, x0: np.ndarray, steps: int) -> np.ndarray:
    """Integrate ``dx/dt = velocity(x, t)`` from ``t = 0`` to 1 in ``steps`` Euler steps.

    ``t`` takes the values ``k / steps`` for ``k < steps``; the state keeps the dtype of ``x0``.
    """
    if steps < 1:
        raise ValueError(f"integration needs at least one step, got {steps}")
    dt = 1.0 / steps
    x = x0
    for k in range(steps):
        t = np.full(x.shape[0], k * dt)
        x = (x + dt * velocity(x, t)).astype(x0.dtype, copy=False)
    return x
