"""Autoregressive waypoint plan: teacher-forced logits, loss and decoding."""

from __future__ import annotations

import numpy as np

from ..autograd import Tensor, cross_entropy, no_grad, reshape, scale
from ..builders.batch_builder import EpisodeBatch
from ..builders.layout_builder import LayoutError
from ..constants import EXPERT_VL, SPAN_TRAJ3D
from .policy import MotHraPolicy, PolicyInputs

WAYPOINT_MODES = ("greedy", "sample")


def loss_3d(logits: Tensor, target_bins: np.ndarray) -> Tensor:
    """Summed coordinate-wise cross-entropy over ``H x 3`` targets, averaged over the batch."""
    batch, horizon, coords, bins = logits.shape
    targets = np.asarray(target_bins)
    if targets.shape != (batch, horizon, coords):
        raise LayoutError(f"waypoint targets {targets.shape} do not match logits {logits.shape}")
    flat = reshape(logits, (batch * horizon * coords, bins))
    return scale(cross_entropy(flat, targets.reshape(-1)), 1.0 / batch)


def teacher_forced_logits(policy: MotHraPolicy, batch: EpisodeBatch) -> Tensor:
    """``B x H x 3 x bins`` logits with traj3d token ``h`` fed ground-truth waypoint ``h - 1``."""
    if not policy.layout.has_span(SPAN_TRAJ3D):
        raise LayoutError("the layout has no traj3d span")
    out = policy.forward(
        PolicyInputs(
            scene=batch.scene,
            text=batch.text,
            text_dropped=batch.text_dropped,
            plan_bins=batch.plan_bins,
        ),
        stop_after=EXPERT_VL,
    )
    assert out.waypoint_logits is not None
    return out.waypoint_logits


def _categorical(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    scaled = logits.astype(np.float64) / temperature
    scaled -= scaled.max(axis=-1, keepdims=True)
    probs = np.exp(scaled)
    probs /= probs.sum(axis=-1, keepdims=True)
    u = rng.uniform(size=probs.shape[:-1])[..., None]
    picks = (np.cumsum(probs, axis=-1) < u).sum(axis=-1)
    return np.minimum(picks, logits.shape[-1] - 1)


def decode_waypoints(
    policy: MotHraPolicy,
    scene: np.ndarray,
    text: np.ndarray,
    mode: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Decode ``B x H x 3`` waypoint bins left to right.

    Step ``h`` feeds the bins decoded at ``h - 1`` (a learned begin token at step 0).
    ``greedy`` takes the lowest-index argmax; ``sample`` draws from the
    temperature-scaled categorical, and a non-positive temperature falls back to greedy.
    """
    if mode not in WAYPOINT_MODES:
        raise ValueError(f"unknown waypoint mode {mode!r}; expected one of {WAYPOINT_MODES}")
    if not policy.layout.has_span(SPAN_TRAJ3D):
        raise LayoutError("the layout has no traj3d span")
    horizon = policy.config.model.horizon
    batch = scene.shape[0]
    rng = np.random.default_rng(seed)
    greedy = mode == "greedy" or temperature <= 0.0
    bins = np.zeros((batch, horizon, 3), dtype=np.int64)
    with no_grad():
        for h in range(horizon):
            out = policy.forward(
                PolicyInputs(scene=scene, text=text, plan_bins=bins), stop_after=EXPERT_VL
            )
            assert out.waypoint_logits is not None
            logits = out.waypoint_logits.data[:, h]
            if greedy:
                bins[:, h] = np.argmax(logits, axis=-1)
            else:
                bins[:, h] = _categorical(logits, temperature, rng)
    return bins


def waypoint_accuracy(pred_bins: np.ndarray, gt_bins: np.ndarray) -> np.ndarray:
    """Per-coordinate top-1 accuracy (x, y, z) over every timestep and episode."""
    pred = np.asarray(pred_bins)
    gt = np.asarray(gt_bins)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"waypoint bins {pred.shape} and {gt.shape} must match and end in 3")
    return (pred == gt).reshape(-1, 3).mean(axis=0)
