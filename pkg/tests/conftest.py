"""
Shared fixtures: a tiny float64 configuration, a policy built from it and a small world.
"""

from __future__ import annotations

import logging

import numpy as np
import pytest

from mot_hra.autograd.gradcheck import analytic_gradients, numerical_gradient
from mot_hra.builders.batch_builder import ActionNormalization, EpisodeBatch, collate
from mot_hra.config import RunConfig, with_overrides
from mot_hra.constants import SPLIT_TRAIN
from mot_hra.model.policy import MotHraPolicy
from mot_hra.services.trainer import joint_loss
from mot_hra.synth.world import Episode, SplitSpec, choose_held_out, generate_world

TINY_OVERRIDES = {
    "trunk.depth": 1,
    "trunk.width": 16,
    "trunk.heads": 2,
    "trunk.ffn_mult": 2,
    "model.horizon": 4,
    "model.bins": 16,
    "model.n_img_tokens": 3,
    "model.n_text_tokens": 3,
    "model.init_std": 0.2,
    "model.dtype": "float64",
    "optim.lr": 1.0e-3,
    "optim.ema_decay": 0.9,
    "schedule.steps": 3,
    "schedule.warmup_steps": 1,
    "schedule.batch_size": 4,
    "schedule.checkpoint_every": 2,
    "sampling.flow_steps": 2,
    "sampling.cfg_scale": 2.0,
    "data.train_latents": 8,
    "data.eval_episodes": 2,
    "data.held_out_combinations": 2,
    "eval.clips": 2,
    "eval.generations": 2,
    "eval.ablation_seeds": 1,
    "seed.root": 7,
}


def make_config(**overrides) -> RunConfig:
    """Tiny config; keyword overrides use ``section__name`` for ``section.name``."""
    merged = dict(TINY_OVERRIDES)
    merged.update({k.replace("__", "."): v for k, v in overrides.items()})
    return with_overrides(RunConfig(), merged)


@pytest.fixture
def tiny_config() -> RunConfig:
    return make_config()


@pytest.fixture
def policy(tiny_config: RunConfig) -> MotHraPolicy:
    return MotHraPolicy.initialize(tiny_config)


@pytest.fixture(scope="session")
def world() -> list[Episode]:
    config = make_config()
    held_out = choose_held_out(config.seed.root, config.data.held_out_combinations)
    spec = SplitSpec(
        horizon=config.model.horizon,
        held_out=held_out,
        held_out_region=config.data.held_out_region,
    )
    return generate_world(
        config.data.train_latents, config.data.eval_episodes, spec, config.seed.root
    )


@pytest.fixture(scope="session")
def normalization(world: list[Episode]) -> ActionNormalization:
    chunks = [e.actions for e in world if e.split == SPLIT_TRAIN and e.actions is not None]
    return ActionNormalization.fit(chunks)


def batch_of(episodes: list[Episode], config: RunConfig) -> EpisodeBatch:
    m = config.model
    return collate(
        episodes,
        n_img=m.n_img_tokens,
        n_txt=m.n_text_tokens,
        horizon=m.horizon,
        bins=m.bins,
        coord_range=m.coord_range,
        action_dim=m.action_dim,
    )


@pytest.fixture
def mixed_batch(world: list[Episode], tiny_config: RunConfig) -> EpisodeBatch:
    """Two human and two robot training episodes."""
    train = [e for e in world if e.split == SPLIT_TRAIN]
    humans = [e for e in train if e.has_hand][:2]
    robots = [e for e in train if e.has_actions][:2]
    return batch_of(humans + robots, tiny_config)


@pytest.fixture
def rngs():
    def make(seed: int = 0) -> tuple[np.random.Generator, np.random.Generator]:
        return np.random.default_rng(seed), np.random.default_rng(seed + 1000)

    return make


@pytest.fixture
def restore_root_logger():
    """Undo ``setup_structured_logging`` on the root logger after the test."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield root
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        if handler not in handlers:
            handler.close()
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(level)


TERM_WEIGHTS = {
    "3d": {"loss__lambda_m": 0.0, "loss__lambda_a": 0.0},
    "mano": {"loss__lambda_3d": 0.0, "loss__lambda_a": 0.0},
    "act": {"loss__lambda_3d": 0.0, "loss__lambda_m": 0.0},
}


def loss_term_gradients(
    term: str, batch: EpisodeBatch, seed: int, names: tuple[str, ...]
) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Analytic and central-difference gradients of one joint-loss term, insulation off.

    Returns ``(name, analytic, numeric)`` per parameter of a policy initialized from ``seed``.
    """
    config = make_config(trunk__insulate=False, **TERM_WEIGHTS[term])
    policy = MotHraPolicy.initialize(config, np.random.default_rng(seed))
    params = [policy.params[name] for name in names]

    def loss():
        time_rng, noise_rng = np.random.default_rng(seed + 1), np.random.default_rng(seed + 2)
        return joint_loss(policy, batch, time_rng, noise_rng).total

    analytic = analytic_gradients(loss, params)
    return [
        (name, a, numerical_gradient(loss, p))
        for name, a, p in zip(names, analytic, params, strict=True)
    ]
