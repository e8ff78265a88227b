from __future__ import annotations

import math


def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``.

    Steps past ``total_steps`` stay at 0.
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if warmup_steps < 0 or total_steps < warmup_steps:
        raise ValueError(
            f"invalid schedule: warmup_steps={warmup_steps}, total_steps={total_steps}"
        )

    if step < warmup_steps:
        return base_lr * step / warmup_steps

    if step >= total_steps:
        return 0.0

    decay_steps = total_steps - warmup_steps
    progress = (step - warmup_steps) / decay_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
