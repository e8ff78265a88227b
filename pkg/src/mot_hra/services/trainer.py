"""Joint partially-supervised training of the three experts."""

from __future__ import annotations

import time
import uuid
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from ..autograd import NumericError, Tensor, add, backward, clear_graph, scale
from ..builders.batch_builder import ActionNormalization, EpisodeBatch, collate
from ..config import RunConfig, config_digest
from ..constants import (
    EXPERT_FINE,
    EXPERT_INTENTION,
    EXPERT_VL,
    SPAN_MANO,
    SPAN_TRAJ3D,
    SPLIT_TRAIN,
    STREAM_DATA,
    STREAM_DROPOUT,
    STREAM_FLOW_NOISE,
    STREAM_FLOW_TIME,
)
from ..logging import logger
from ..metrics import NUMERIC_FAILURES_TOTAL, TRAIN_LOSS, TRAIN_STEP_DURATION, TRAIN_STEPS_TOTAL
from ..model.fine_expert import action_flow_loss
from ..model.flow import FlowBatch, draw_flow_batch
from ..model.intention_expert import mano_flow_loss
from ..model.params import ParamStore
from ..model.policy import MotHraPolicy, PolicyInputs
from ..model.vl_expert import loss_3d
from ..synth.world import Episode
from ..utils.schedule import lr_schedule
from ..utils.seeding import stream_rng, stream_seeds
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .optimizer import EMA, AdamW, clip_grad_norm


class TrainingDivergedError(NumericError):
    """Raised when a training loss becomes non-finite."""

    pass


@dataclass(frozen=True)
class StepLosses:
    step: int
    lr: float
    loss_3d: float
    loss_mano: float
    loss_act: float
    loss_total: float
    grad_norm: float
    wall_time: float

    def as_fields(self) -> dict[str, Any]:
        return {
            "lr": self.lr,
            "loss_3d": self.loss_3d,
            "loss_mano": self.loss_mano,
            "loss_act": self.loss_act,
            "loss_total": self.loss_total,
            "grad_norm": self.grad_norm,
            "wall_time": self.wall_time,
        }


@dataclass(eq=False)
class JointLoss:
    total: Tensor
    loss_3d: float
    loss_mano: float
    loss_act: float


def apply_instruction_dropout(
    batch: EpisodeBatch, p: float, rng: np.random.Generator
) -> EpisodeBatch:
    """Flag each episode's instruction as dropped with probability ``p``.

    Dropped rows are embedded with the learned null instruction, the same one the
    guided hand sampler uses for its unconditional branch.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"instruction dropout must lie in [0, 1], got {p}")
    if p == 0.0:
        return batch
    dropped = rng.uniform(size=batch.size) < p
    return batch.with_text_dropped(batch.text_dropped | dropped)


def robot_row_mano_state(
    flow: FlowBatch, has_mano: np.ndarray, time_rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Mano-span input and time for a mixed batch.

    Rows with hand targets keep ``flow.x_t`` and their own ``t``. Rows without them get
    the pure noise ``flow.eps`` at a single ``t ~ U(0, 1)`` drawn once per batch. At
    inference the action span sees the last Euler step's hand state instead.
    """
    has = np.asarray(has_mano, dtype=bool)
    if has.all():
        return flow.x_t, flow.t
    shared_t = time_rng.uniform(0.0, 1.0)
    x = np.where(has[:, None, None], flow.x_t, flow.eps)
    t = np.where(has, flow.t, shared_t)
    return x, t


def joint_loss(
    policy: MotHraPolicy,
    batch: EpisodeBatch,
    time_rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> JointLoss:
    """``lambda_3d L_3d + lambda_m L_mano + lambda_a L_act`` from one combined forward pass.

    Episodes without hand targets put a pure-noise state in the mano span, so the
    intention expert still runs for them and the action span can attend to it. Terms
    whose indicator is off for the whole batch contribute nothing.
    """
    if batch.size == 0:
        raise ValueError("empty batch")
    if not np.all(batch.has_mano | batch.has_action):
        raise ValueError("every episode needs hand states or actions")
    layout = policy.layout
    weights = policy.config.loss
    has_traj = layout.has_span(SPAN_TRAJ3D)
    has_mano_span = layout.has_span(SPAN_MANO)
    any_action = bool(batch.has_action.any())

    mano_flow = action_flow = None
    inputs = PolicyInputs(
        scene=batch.scene,
        text=batch.text,
        text_dropped=batch.text_dropped,
        plan_bins=batch.plan_bins if has_traj else None,
    )
    if has_mano_span:
        mano_flow = draw_flow_batch(batch.hand, time_rng, noise_rng)
        inputs.mano_x, inputs.mano_t = robot_row_mano_state(mano_flow, batch.has_mano, time_rng)
        inputs.mano_valid = np.where(batch.has_mano[:, None], batch.hand_valid, True)
    if any_action:
        action_flow = draw_flow_batch(batch.actions, time_rng, noise_rng)
        inputs.action_x = action_flow.x_t
        inputs.action_t = action_flow.t

    if any_action:
        stop_after = EXPERT_FINE
    elif has_mano_span:
        stop_after = EXPERT_INTENTION
    else:
        stop_after = EXPERT_VL
    out = policy.forward(inputs, stop_after=stop_after)

    terms: list[Tensor] = []
    value_3d = value_mano = value_act = 0.0
    if has_traj:
        assert out.waypoint_logits is not None
        l3d = loss_3d(out.waypoint_logits, batch.plan_bins)
        value_3d = l3d.item()
        if weights.lambda_3d:
            terms.append(scale(l3d, weights.lambda_3d))
    if has_mano_span and batch.has_mano.any():
        assert out.mano_velocity is not None and mano_flow is not None
        lm = mano_flow_loss(out.mano_velocity, mano_flow, batch.has_mano, batch.hand_valid)
        value_mano = lm.item()
        if weights.lambda_m:
            terms.append(scale(lm, weights.lambda_m))
    if any_action:
        assert out.action_velocity is not None and action_flow is not None
        la = action_flow_loss(out.action_velocity, action_flow, batch.has_action)
        value_act = la.item()
        if weights.lambda_a:
            terms.append(scale(la, weights.lambda_a))

    if not terms:
        raise ValueError("every loss term is disabled for this batch")
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return JointLoss(total=total, loss_3d=value_3d, loss_mano=value_mano, loss_act=value_act)


def joint_step(
    policy: MotHraPolicy,
    batch: EpisodeBatch,
    optimizer: AdamW,
    ema: EMA,
    step: int,
    time_rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> StepLosses:
    """Forward, one backward pass, clipping, AdamW at the scheduled rate, then EMA."""
    config = policy.config
    started = time.perf_counter()
    policy.params.zero_grad()
    loss = joint_loss(policy, batch, time_rng, noise_rng)
    total = loss.total.item()
    if not np.isfinite(total):
        clear_graph()
        NUMERIC_FAILURES_TOTAL.labels(stage="train").inc()
        raise TrainingDivergedError(
            f"non-finite loss at step {step}: total={total} "
            f"(3d={loss.loss_3d}, mano={loss.loss_mano}, act={loss.loss_act})"
        )
    backward(loss.total)
    grad_norm = clip_grad_norm(policy.params, config.optim.grad_clip)
    lr = lr_schedule(
        optimizer.state.step + 1,
        config.optim.lr,
        config.schedule.warmup_steps,
        config.schedule.steps,
    )
    optimizer.step(lr)
    ema.update(policy.params)
    return StepLosses(
        step=step,
        lr=lr,
        loss_3d=loss.loss_3d,
        loss_mano=loss.loss_mano,
        loss_act=loss.loss_act,
        loss_total=total,
        grad_norm=grad_norm,
        wall_time=time.perf_counter() - started,
    )


class BatchSampler:
    """Draws training batches mixing human and robot episodes at a fixed ratio.

    Batch ``step`` depends only on the root seed and ``step``.
    """

    def __init__(
        self,
        episodes: Sequence[Episode],
        config: RunConfig,
        normalization: ActionNormalization,
    ) -> None:
        self.humans = [e for e in episodes if e.has_hand and not e.has_actions]
        self.robots = [e for e in episodes if e.has_actions and not e.has_hand]
        if config.ablation.no_traj3d and config.ablation.no_intention:
            # Nothing in this layout is supervised by human episodes
            self.humans = []
        if not self.humans and not self.robots:
            raise ValueError("no training episodes with hand states or actions")
        self.config = config
        self.normalization = normalization

    def counts(self) -> tuple[int, int]:
        size = self.config.schedule.batch_size
        if not self.robots:
            return size, 0
        if not self.humans:
            return 0, size
        humans = min(max(round(size * self.config.data.human_fraction), 0), size)
        return humans, size - humans

    def batch(self, step: int) -> EpisodeBatch:
        rng = stream_rng(self.config.seed.root, STREAM_DATA, f"batch:{step}")
        n_humans, n_robots = self.counts()
        chosen = [self.humans[int(i)] for i in rng.integers(len(self.humans) or 1, size=n_humans)]
        chosen += [self.robots[int(i)] for i in rng.integers(len(self.robots) or 1, size=n_robots)]
        m = self.config.model
        return collate(
            chosen,
            n_img=m.n_img_tokens,
            n_txt=m.n_text_tokens,
            horizon=m.horizon,
            bins=m.bins,
            coord_range=m.coord_range,
            action_dim=m.action_dim,
            normalization=self.normalization,
        )


class TrainerService:
    """Owns the policy, optimizer and EMA of one run and drives the training loop."""

    def __init__(
        self,
        config: RunConfig,
        episodes: Sequence[Episode],
        normalization: ActionNormalization,
        run_id: str | None = None,
        policy: MotHraPolicy | None = None,
    ) -> None:
        self.config = config
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self.policy = policy or MotHraPolicy.initialize(config)
        self.optimizer = AdamW(self.policy.params, config.optim)
        self.ema = EMA(
            self.policy.params, config.optim.ema_decay, warmup=config.optim.ema_warmup
        )
        self.sampler = BatchSampler(
            [e for e in episodes if e.split == SPLIT_TRAIN], config, normalization
        )
        self.step = 0

    @classmethod
    def from_checkpoint(
        cls,
        checkpoint: Checkpoint | str | Path,
        episodes: Sequence[Episode],
        normalization: ActionNormalization,
        run_id: str | None = None,
        config: RunConfig | None = None,
    ) -> TrainerService:
        """Resume a run: parameters, optimizer moments, EMA shadows and the step counter."""
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        trainer = cls(config or ckpt.config, episodes, normalization, run_id=run_id)
        trainer.policy.params.load_arrays(ckpt.params)
        if ckpt.adam_m is not None and ckpt.adam_v is not None:
            for name in trainer.policy.params:
                trainer.optimizer.state.m[name][...] = ckpt.adam_m[name]
                trainer.optimizer.state.v[name][...] = ckpt.adam_v[name]
            trainer.optimizer.state.step = ckpt.optimizer_step
        if ckpt.ema is not None:
            trainer.ema.shadow = {n: v.copy() for n, v in ckpt.ema.items()}
            trainer.ema.updates = ckpt.ema_updates
        trainer.step = ckpt.step
        return trainer

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            step=self.step,
            params=self.policy.params.arrays(),
            adam_m={n: v.copy() for n, v in self.optimizer.state.m.items()},
            adam_v={n: v.copy() for n, v in self.optimizer.state.v.items()},
            ema={n: v.copy() for n, v in self.ema.shadow.items()},
            optimizer_step=self.optimizer.state.step,
            ema_updates=self.ema.updates,
        )

    def ema_params(self) -> ParamStore:
        return self.ema.store(self.policy.params)

    def log_run_header(self) -> None:
        logger.info(
            "Training run started",
            component="trainer",
            run_id=self.run_id,
            event="run_header",
            rootSeed=self.config.seed.root,
            streamSeeds=stream_seeds(self.config.seed.root),
            configDigest=config_digest(self.config),
            parameters=self.policy.params.count(),
            startStep=self.step,
        )

    def train_step(self) -> StepLosses:
        root = self.config.seed.root
        step = self.step
        batch = self.sampler.batch(step)
        batch = apply_instruction_dropout(
            batch,
            self.config.sampling.instruction_dropout,
            stream_rng(root, STREAM_DROPOUT, step),
        )
        result = joint_step(
            self.policy,
            batch,
            self.optimizer,
            self.ema,
            step,
            stream_rng(root, STREAM_FLOW_TIME, step),
            stream_rng(root, STREAM_FLOW_NOISE, step),
        )
        self.step += 1

        TRAIN_STEPS_TOTAL.labels(run=self.run_id).inc()
        TRAIN_STEP_DURATION.observe(result.wall_time)
        TRAIN_LOSS.labels(term="3d").set(result.loss_3d)
        TRAIN_LOSS.labels(term="mano").set(result.loss_mano)
        TRAIN_LOSS.labels(term="act").set(result.loss_act)
        TRAIN_LOSS.labels(term="total").set(result.loss_total)
        logger.info(
            "Training step",
            component="trainer",
            run_id=self.run_id,
            step=step,
            event="train_step",
            **result.as_fields(),
        )
        return result

    def train(
        self,
        steps: int | None = None,
        checkpoint_dir: str | Path | None = None,
        on_step: Callable[[StepLosses], None] | None = None,
    ) -> list[StepLosses]:
        """Run until ``steps`` optimizer steps have been taken in total.

        Periodic checkpoints go to ``checkpoint_dir``; the final one is ``final.moth``.
        """
        target = self.config.schedule.steps if steps is None else steps
        every = self.config.schedule.checkpoint_every
        self.log_run_header()
        history: list[StepLosses] = []
        while self.step < target:
            result = self.train_step()
            history.append(result)
            if on_step is not None:
                on_step(result)
            if checkpoint_dir is not None and every > 0 and self.step % every == 0:
                path = Path(checkpoint_dir) / f"step-{self.step:06d}.moth"
                save_checkpoint(path, self.checkpoint())
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / "final.moth", self.checkpoint())
        return history
