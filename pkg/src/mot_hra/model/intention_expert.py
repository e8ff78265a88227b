"""Hand-motion flow matching, guided sampling and capture of the intention states."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from ..autograd import Tensor, mse_weighted, no_grad
from ..builders.batch_builder import EpisodeBatch
from ..builders.layout_builder import LayoutError
from ..constants import EXPERT_INTENTION, HAND_DIM, SPAN_MANO, WRIST_DIM
from ..utils.quaternion import renormalize_hand
from .flow import FlowBatch, cfg_combine, draw_flow_batch, euler_integrate
from .policy import MotHraPolicy, PolicyInputs, PolicyOutputs
from .trunk import read_hidden


@dataclass(frozen=True, eq=False)
class IntentionStates:
    """Final-layer mano-span hidden states of the last integration step.

    ``state`` and ``t`` are that step's mano-span input, so a later pass that feeds them
    back (with the same conditioning) reproduces ``hidden`` exactly.
    """

    hidden: np.ndarray
    state: np.ndarray
    t: np.ndarray
    valid: np.ndarray


def mano_loss_weights(has_mano: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """``B x H x 67`` weights: ``1/(7 Hv)`` on the wrist, ``1/(60 Hv)`` on joints.

    ``Hv`` is the episode's valid length; padded steps and episodes without hand targets
    weigh zero, and the result is averaged over the episodes that have them.
    """
    has = np.asarray(has_mano, dtype=bool)
    ok = np.asarray(valid, dtype=bool) & has[:, None]
    n_episodes = int(has.sum())
    weights = np.zeros((*ok.shape, HAND_DIM))
    if n_episodes == 0:
        return weights
    counts = np.maximum(ok.sum(axis=1), 1).astype(np.float64)[:, None]
    step = ok.astype(np.float64) / counts / n_episodes
    weights[..., :WRIST_DIM] = (step / WRIST_DIM)[..., None]
    weights[..., WRIST_DIM:] = (step / (HAND_DIM - WRIST_DIM))[..., None]
    return weights


def mano_flow_loss(
    velocity: Tensor, flow: FlowBatch, has_mano: np.ndarray, valid: np.ndarray
) -> Tensor:
    return mse_weighted(velocity, flow.v_star, mano_loss_weights(has_mano, valid))


def flow_loss_mano(
    policy: MotHraPolicy,
    batch: EpisodeBatch,
    time_rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> tuple[Tensor, FlowBatch]:
    """Flow-matching loss of the hand sequence given teacher-forced waypoints."""
    if not policy.layout.has_span(SPAN_MANO):
        raise LayoutError("the layout has no mano span")
    flow = draw_flow_batch(batch.hand, time_rng, noise_rng)
    out = policy.forward(
        PolicyInputs(
            scene=batch.scene,
            text=batch.text,
            text_dropped=batch.text_dropped,
            plan_bins=batch.plan_bins,
            mano_x=flow.x_t,
            mano_t=flow.t,
            mano_valid=batch.hand_valid,
        ),
        stop_after=EXPERT_INTENTION,
    )
    assert out.mano_velocity is not None
    return mano_flow_loss(out.mano_velocity, flow, batch.has_mano, batch.hand_valid), flow


def sample_mano(
    policy: MotHraPolicy,
    scene: np.ndarray,
    text: np.ndarray,
    plan_bins: np.ndarray | None,
    steps: int,
    cfg_scale: float,
    seed: int,
    valid: np.ndarray | None = None,
) -> tuple[np.ndarray, IntentionStates]:
    """Euler-integrate the guided hand velocity from ``eps(seed)``.

    The unconditional branch replaces the instruction with the learned null
    instruction. Quaternion blocks are renormalized after integration; the intention
    states come from the final step's conditional pass.
    """
    if steps < 1:
        raise ValueError(f"sample_mano needs at least one step, got {steps}")
    if not policy.layout.has_span(SPAN_MANO):
        raise LayoutError("the layout has no mano span")
    batch = scene.shape[0]
    horizon = policy.config.model.horizon
    mask = np.ones((batch, horizon), dtype=bool) if valid is None else np.asarray(valid, bool)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((batch, horizon, HAND_DIM)).astype(policy.dtype)
    last: dict[str, Any] = {}

    def run(x: np.ndarray, t: np.ndarray, dropped: bool) -> PolicyOutputs:
        return policy.forward(
            PolicyInputs(
                scene=scene,
                text=text,
                text_dropped=np.full(batch, dropped),
                plan_bins=plan_bins,
                mano_x=x,
                mano_t=t,
                mano_valid=mask,
            ),
            stop_after=EXPERT_INTENTION,
        )

    def velocity(x: np.ndarray, t: np.ndarray) -> np.ndarray:
        cond = run(x, t, False)
        assert cond.mano_velocity is not None
        # Overwritten every step; the integrator's final call is what remains.
        last.update(x=x, t=t, cond=cond)
        v = cond.mano_velocity.data
        if cfg_scale == 1.0:
            return v
        uncond = run(x, t, True)
        assert uncond.mano_velocity is not None
        return cfg_combine(v, uncond.mano_velocity.data, cfg_scale)

    with no_grad():
        x = euler_integrate(velocity, x0, steps)
        captured = IntentionStates(
            hidden=read_hidden(last["cond"].states, policy.layout, SPAN_MANO).data.copy(),
            state=last["x"].copy(),
            t=last["t"],
            valid=mask.copy(),
        )
    return renormalize_hand(x), captured
