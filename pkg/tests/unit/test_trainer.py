"""Unit tests for the joint training step, batch sampling and the trainer service."""

import logging

import numpy as np
import pytest
from conftest import make_config
from prometheus_client import REGISTRY

from mot_hra.model.flow import make_flow_batch
from mot_hra.services.checkpoint import load_checkpoint, save_checkpoint
from mot_hra.services.optimizer import EMA, AdamW
from mot_hra.services.trainer import (
    BatchSampler,
    TrainerService,
    TrainingDivergedError,
    apply_instruction_dropout,
    joint_loss,
    joint_step,
    robot_row_mano_state,
)


def numeric_failures() -> float:
    value = REGISTRY.get_sample_value("mot_hra_numeric_failures_total", {"stage": "train"})
    return value or 0.0


class TestInstructionDropout:
    def test_zero_probability_returns_the_batch(self, mixed_batch):
        assert apply_instruction_dropout(mixed_batch, 0.0, np.random.default_rng(0)) is mixed_batch

    def test_full_probability_drops_every_row(self, mixed_batch):
        dropped = apply_instruction_dropout(mixed_batch, 1.0, np.random.default_rng(0))
        assert dropped.text_dropped.all()
        assert not mixed_batch.text_dropped.any()

    def test_invalid_probability(self, mixed_batch):
        with pytest.raises(ValueError):
            apply_instruction_dropout(mixed_batch, 1.5, np.random.default_rng(0))

    def test_drop_rate_over_ten_thousand_episodes(self, mixed_batch):
        large = mixed_batch.select(np.arange(10_000) % mixed_batch.size)
        dropped = apply_instruction_dropout(large, 0.1, np.random.default_rng(2024))
        assert abs(dropped.text_dropped.mean() - 0.1) <= 0.01


class TestRobotRowManoState:
    def test_rows_without_hand_targets_get_pure_noise_at_one_time(self):
        rng = np.random.default_rng(4)
        target = rng.standard_normal((4, 3, 67))
        eps = rng.standard_normal((4, 3, 67))
        flow = make_flow_batch(target, eps, np.array([0.2, 0.4, 0.6, 0.8]))
        has_mano = np.array([True, False, True, False])
        x, t = robot_row_mano_state(flow, has_mano, np.random.default_rng(9))
        shared = np.random.default_rng(9).uniform(0.0, 1.0)
        np.testing.assert_array_equal(x[has_mano], flow.x_t[has_mano])
        np.testing.assert_array_equal(x[~has_mano], eps[~has_mano])
        np.testing.assert_array_equal(t, [0.2, shared, 0.6, shared])

    def test_all_human_batches_draw_nothing_extra(self):
        target = np.ones((2, 3, 67))
        flow = make_flow_batch(target, np.zeros_like(target), np.array([0.5, 0.25]))
        rng = np.random.default_rng(1)
        x, t = robot_row_mano_state(flow, np.array([True, True]), rng)
        assert x is flow.x_t and t is flow.t
        assert rng.uniform() == np.random.default_rng(1).uniform()

    def test_joint_loss_feeds_noise_for_robot_rows(self, policy, mixed_batch, rngs, monkeypatch):
        seen = []
        forward = policy.forward

        def recording(inputs, **kwargs):
            seen.append(inputs)
            return forward(inputs, **kwargs)

        monkeypatch.setattr(policy, "forward", recording)
        time_rng, noise_rng = rngs()
        joint_loss(policy, mixed_batch, time_rng, noise_rng)

        expected_time, expected_noise = rngs()
        per_row_t = expected_time.uniform(0.0, 1.0, size=mixed_batch.size)
        eps = expected_noise.standard_normal(mixed_batch.hand.shape)
        shared_t = expected_time.uniform(0.0, 1.0)
        (inputs,) = seen
        robots = ~mixed_batch.has_mano
        assert robots.tolist() == [False, False, True, True]
        np.testing.assert_array_equal(inputs.mano_x[robots], eps[robots])
        np.testing.assert_array_equal(inputs.mano_t[robots], shared_t)
        np.testing.assert_array_equal(inputs.mano_t[~robots], per_row_t[~robots])


class TestBatchSampler:
    def test_counts_follow_the_human_fraction(self, world, normalization, tiny_config):
        sampler = BatchSampler(world, tiny_config, normalization)
        assert sampler.counts() == (2, 2)

    def test_batches_depend_only_on_the_step(self, world, normalization, tiny_config):
        a = BatchSampler(world, tiny_config, normalization).batch(5)
        b = BatchSampler(world, tiny_config, normalization).batch(5)
        np.testing.assert_array_equal(a.plan_bins, b.plan_bins)
        np.testing.assert_array_equal(a.has_mano, b.has_mano)

    def test_baseline_layout_uses_robot_episodes_only(self, world, normalization):
        config = make_config(ablation__no_traj3d=True, ablation__no_intention=True)
        sampler = BatchSampler(world, config, normalization)
        assert sampler.counts() == (0, 4)
        assert sampler.batch(0).has_action.all()


class TestJointStep:
    def test_step_updates_parameters_and_ema(self, policy, mixed_batch, rngs):
        optimizer = AdamW(policy.params, policy.config.optim)
        ema = EMA(policy.params, policy.config.optim.ema_decay)
        before = policy.params.arrays()
        result = joint_step(policy, mixed_batch, optimizer, ema, 0, *rngs())
        assert np.isfinite(result.loss_total)
        assert result.loss_total == pytest.approx(
            result.loss_3d + result.loss_mano + result.loss_act
        )
        assert result.lr == pytest.approx(1.0e-3)
        assert optimizer.state.step == 1 and ema.updates == 1
        assert ema.effective_decay() == policy.config.optim.ema_decay
        assert not np.array_equal(policy.params["fine.act_out_b"].data, before["fine.act_out_b"])

    def test_non_finite_loss_stops_training(self, policy, mixed_batch, rngs):
        policy.params["fine.act_out_b"].data[...] = np.nan
        optimizer = AdamW(policy.params, policy.config.optim)
        ema = EMA(policy.params, policy.config.optim.ema_decay)
        failures = numeric_failures()
        with pytest.raises(TrainingDivergedError, match="non-finite loss at step 4"):
            joint_step(policy, mixed_batch, optimizer, ema, 4, *rngs())
        assert numeric_failures() == failures + 1
        assert optimizer.state.step == 0


class TestTrainerService:
    def test_train_writes_checkpoints(self, tmp_path, world, normalization, tiny_config):
        trainer = TrainerService(tiny_config, world, normalization, run_id="unit")
        history = trainer.train(checkpoint_dir=tmp_path)
        assert [h.step for h in history] == [0, 1, 2]
        assert trainer.step == 3
        assert (tmp_path / "step-000002.moth").is_file()
        final = load_checkpoint(tmp_path / "final.moth")
        assert final.step == 3 and final.optimizer_step == 3 and final.ema_updates == 3

    def test_fifty_step_runs_are_reproducible(self, world, normalization):
        config = make_config(schedule__steps=50, schedule__checkpoint_every=50)
        a = TrainerService(config, world, normalization)
        b = TrainerService(config, world, normalization)
        losses_a = [h.loss_total for h in a.train()]
        losses_b = [h.loss_total for h in b.train()]
        assert len(losses_a) == 50
        assert losses_a == losses_b
        for name, value in a.policy.params.arrays().items():
            np.testing.assert_array_equal(value, b.policy.params[name].data)

    def test_resume_matches_an_uninterrupted_run(self, tmp_path, world, normalization, tiny_config):
        straight = TrainerService(tiny_config, world, normalization)
        straight.train()

        first = TrainerService(tiny_config, world, normalization)
        first.train(steps=2)
        path = save_checkpoint(tmp_path / "mid.moth", first.checkpoint())
        resumed = TrainerService.from_checkpoint(path, world, normalization)
        assert resumed.step == 2
        resumed.train()

        for name, value in straight.policy.params.arrays().items():
            np.testing.assert_array_equal(value, resumed.policy.params[name].data)
            np.testing.assert_array_equal(straight.ema.shadow[name], resumed.ema.shadow[name])

    def test_run_header_is_logged(self, caplog, world, normalization, tiny_config):
        caplog.set_level(logging.INFO)
        trainer = TrainerService(tiny_config, world, normalization, run_id="hdr")
        trainer.train(steps=1)
        headers = [r for r in caplog.records if getattr(r, "event", None) == "run_header"]
        assert len(headers) == 1
        assert headers[0].runId == "hdr"
        assert headers[0].rootSeed == 7
        assert headers[0].parameters == trainer.policy.params.count()
