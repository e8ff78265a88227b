"""Action-chunk flow matching conditioned on the plan and the intention states."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autograd import Tensor, mse_weighted, no_grad
from ..builders.batch_builder import EpisodeBatch
from ..builders.layout_builder import LayoutError
from ..constants import SPAN_MANO, SPAN_TRAJ3D
from ..metrics import SAMPLING_DURATION
from ..utils.seeding import derive_seed
from .flow import FlowBatch, draw_flow_batch, euler_integrate
from .intention_expert import IntentionStates, sample_mano
from .policy import MotHraPolicy, PolicyInputs
from .vl_expert import decode_waypoints


@dataclass(frozen=True, eq=False)
class ChunkPrediction:
    """Every stage of one sequential inference pass; absent stages are ``None``."""

    plan_bins: np.ndarray | None
    hand: np.ndarray | None
    intention: IntentionStates | None
    actions: np.ndarray


def action_loss_weights(has_action: np.ndarray, horizon: int, action_dim: int) -> np.ndarray:
    """``1 / (|A| H d_a)`` on every entry of episodes with actions, zero elsewhere."""
    has = np.asarray(has_action, dtype=bool)
    weights = np.zeros((has.shape[0], horizon, action_dim))
    n_episodes = int(has.sum())
    if n_episodes:
        weights[has] = 1.0 / (n_episodes * horizon * action_dim)
    return weights


def action_flow_loss(velocity: Tensor, flow: FlowBatch, has_action: np.ndarray) -> Tensor:
    _, horizon, action_dim = velocity.shape
    return mse_weighted(velocity, flow.v_star, action_loss_weights(has_action, horizon, action_dim))


def _mano_inputs(
    policy: MotHraPolicy, intention: IntentionStates | None
) -> tuple[np.ndarray | None, np.ndarray | None, np.ndarray | None]:
    if not policy.layout.has_span(SPAN_MANO):
        return None, None, None
    if intention is None:
        raise LayoutError("the layout has a mano span, so intention states are required")
    return intention.state, intention.t, intention.valid


def flow_loss_act(
    policy: MotHraPolicy,
    batch: EpisodeBatch,
    intention: IntentionStates | None,
    time_rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> tuple[Tensor, FlowBatch]:
    """Flow-matching loss of the action chunk.

    The mano span carries the intention states' input, so its hidden states are the
    captured intention states; they reach the action span only through attention.
    """
    mano_x, mano_t, mano_valid = _mano_inputs(policy, intention)
    flow = draw_flow_batch(batch.actions, time_rng, noise_rng)
    out = policy.forward(
        PolicyInputs(
            scene=batch.scene,
            text=batch.text,
            text_dropped=batch.text_dropped,
            plan_bins=batch.plan_bins,
            mano_x=mano_x,
            mano_t=mano_t,
            mano_valid=mano_valid,
            action_x=flow.x_t,
            action_t=flow.t,
        )
    )
    assert out.action_velocity is not None
    return action_flow_loss(out.action_velocity, flow, batch.has_action), flow


def sample_actions(
    policy: MotHraPolicy,
    scene: np.ndarray,
    text: np.ndarray,
    plan_bins: np.ndarray | None,
    intention: IntentionStates | None,
    steps: int,
    seed: int,
) -> np.ndarray:
    """Euler-integrate the action velocity from ``eps(seed)``; no guidance."""
    if steps < 1:
        raise ValueError(f"sample_actions needs at least one step, got {steps}")
    mano_x, mano_t, mano_valid = _mano_inputs(policy, intention)
    batch = scene.shape[0]
    m = policy.config.model
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((batch, m.horizon, m.action_dim)).astype(policy.dtype)

    def velocity(x: np.ndarray, t: np.ndarray) -> np.ndarray:
        out = policy.forward(
            PolicyInputs(
                scene=scene,
                text=text,
                plan_bins=plan_bins,
                mano_x=mano_x,
                mano_t=mano_t,
                mano_valid=mano_valid,
                action_x=x,
                action_t=t,
            )
        )
        assert out.action_velocity is not None
        return out.action_velocity.data

    with no_grad():
        return euler_integrate(velocity, x0, steps)


def predict_chunk(
    policy: MotHraPolicy,
    scene: np.ndarray,
    text: np.ndarray,
    seed: int,
    flow_steps: int | None = None,
    cfg_scale: float | None = None,
) -> ChunkPrediction:
    """Waypoints, then hand motion (kept only for its intention states), then actions.

    Needs only the scene and the instruction. Stages whose span the layout leaves out
    are skipped.
    """
    sampling = policy.config.sampling
    steps = sampling.flow_steps if flow_steps is None else flow_steps
    scale = sampling.cfg_scale if cfg_scale is None else cfg_scale

    plan_bins = None
    if policy.layout.has_span(SPAN_TRAJ3D):
        with SAMPLING_DURATION.labels(stage="waypoints").time():
            plan_bins = decode_waypoints(
                policy,
                scene,
                text,
                mode=sampling.waypoint_mode,
                temperature=sampling.temperature,
                seed=derive_seed(seed, "waypoints"),
            )

    hand = None
    intention = None
    if policy.layout.has_span(SPAN_MANO):
        with SAMPLING_DURATION.labels(stage="mano").time():
            hand, intention = sample_mano(
                policy, scene, text, plan_bins, steps, scale, seed=derive_seed(seed, "mano")
            )

    with SAMPLING_DURATION.labels(stage="actions").time():
        actions = sample_actions(
            policy, scene, text, plan_bins, intention, steps, seed=derive_seed(seed, "actions")
        )
    return ChunkPrediction(plan_bins=plan_bins, hand=hand, intention=intention, actions=actions)
