"""AdamW with decoupled weight decay, global-norm clipping and EMA shadows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..config import OptimConfig
from ..model.params import ParamStore


@dataclass
class AdamWState:
    """First/second moments per parameter and the number of updates taken."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamStore) -> AdamWState:
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
        )


class AdamW:
    def __init__(self, params: ParamStore, config: OptimConfig) -> None:
        if config.lr < 0.0:
            raise ValueError(f"Invalid learning rate: {config.lr}")
        if config.eps < 0.0:
            raise ValueError(f"Invalid epsilon value: {config.eps}")
        if config.weight_decay < 0.0:
            raise ValueError(f"Invalid weight_decay value: {config.weight_decay}")
        if not (0.0 <= config.beta1 < 1.0 and 0.0 <= config.beta2 < 1.0):
            raise ValueError(f"Invalid betas: ({config.beta1}, {config.beta2})")
        self.params = params
        self.config = config
        self.state = AdamWState.zeros_like(params)

    def step(self, lr: float) -> None:
        """One update at learning rate ``lr`` using the gradients currently held."""
        c = self.config
        self.state.step += 1
        t = self.state.step
        bias_correction1 = 1.0 - c.beta1**t
        bias_correction2 = 1.0 - c.beta2**t
        step_size = lr * math.sqrt(bias_correction2) / bias_correction1

        for name, p in self.params.items():
            if p.grad is None:
                continue
            grad = p.grad
            m = self.state.m[name]
            v = self.state.v[name]

            # Decoupled weight decay
            if c.weight_decay != 0.0:
                p.data -= (lr * c.weight_decay * p.data).astype(p.data.dtype)

            m *= c.beta1
            m += (1.0 - c.beta1) * grad
            v *= c.beta2
            v += (1.0 - c.beta2) * grad * grad

            p.data -= (step_size * m / (np.sqrt(v) + c.eps)).astype(p.data.dtype)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = params.grad_norm()
    if max_norm > 0.0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= factor
    return total


class EMA:
    """Exponential moving average of the parameters, initialized to their current values.

    Each update sets ``shadow = decay * shadow + (1 - decay) * param``. With ``warmup`` the
    decay used is ``min(decay, (1 + n) / (10 + n))`` after ``n`` updates.
    """

    def __init__(self, params: ParamStore, decay: float, warmup: bool = False) -> None:
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
        self.decay = decay
        self.warmup = warmup
        self.shadow = params.arrays()
        self.updates = 0

    def effective_decay(self) -> float:
        if not self.warmup:
            return self.decay
        return min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))

    def update(self, params: ParamStore) -> None:
        decay = self.effective_decay()
        for name, p in params.items():
            shadow = self.shadow[name]
            shadow *= decay
            shadow += ((1.0 - decay) * p.data).astype(shadow.dtype)
        self.updates += 1

    def store(self, params: ParamStore) -> ParamStore:
        """A copy of ``params`` carrying the shadow values."""
        averaged = params.copy()
        averaged.load_arrays(self.shadow)
        return averaged
