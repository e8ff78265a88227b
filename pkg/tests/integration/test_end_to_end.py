"""End-to-end runs on a small world: training progress, ablation table, CLI reproducibility.

These train for real and are deselected by default; run them with ``pytest -m slow``.
"""

import json

import numpy as np
import pytest
from conftest import make_config

from mot_hra import main as cli
from mot_hra.config import render
from mot_hra.constants import EXIT_OK, SPLIT_HELD_OUT_INSTRUCTION, SPLIT_HELD_OUT_LAYOUT
from mot_hra.model.policy import MotHraPolicy
from mot_hra.services.ablation import run_ablation
from mot_hra.services.evaluation import evaluate_clips, format_table
from mot_hra.services.trainer import TrainerService

pytestmark = pytest.mark.slow


def short_run_config(**overrides):
    settings = {
        "schedule__steps": 60,
        "schedule__warmup_steps": 5,
        "schedule__batch_size": 8,
        "optim__lr": 3.0e-3,
        "optim__ema_decay": 0.95,
        "sampling__instruction_dropout": 0.1,
    }
    settings.update(overrides)
    return make_config(**settings)


class TestTraining:
    def test_losses_fall(self, world, normalization):
        trainer = TrainerService(short_run_config(), world, normalization, run_id="e2e")
        history = trainer.train()
        assert len(history) == 60
        first = np.mean([h.loss_total for h in history[:5]])
        last = np.mean([h.loss_total for h in history[-5:]])
        assert last < first
        assert all(np.isfinite(h.grad_norm) for h in history)

    def test_trained_policy_evaluates(self, world, normalization):
        config = short_run_config()
        trainer = TrainerService(config, world, normalization)
        trainer.train()
        clips = [e for e in world if e.split == SPLIT_HELD_OUT_LAYOUT]
        policy = MotHraPolicy(config, trainer.ema_params())
        report = evaluate_clips(policy, clips, normalization)
        assert np.isfinite(report.ade_m) and np.isfinite(report.action_rmse_mean)
        assert 0.0 <= report.waypoint_accuracy_mean <= 1.0


class TestAblation:
    def test_four_rows(self, world, normalization, tmp_path):
        config = short_run_config(schedule__steps=10)
        clips = [e for e in world if e.split == SPLIT_HELD_OUT_INSTRUCTION]
        rows = run_ablation(config, world, normalization, clips, checkpoint_dir=tmp_path)
        assert [r.variant for r in rows] == ["baseline", "+traj3d", "+intention", "+insulation"]
        assert rows[0].report.ade_m is None and rows[0].report.waypoint_accuracy is None
        assert rows[1].report.ade_m is None and rows[1].report.waypoint_accuracy is not None
        assert rows[3].report.ade_m is not None
        assert (tmp_path / "insulation" / "seed-0" / "final.moth").is_file()
        table = format_table([(r.variant, r.report) for r in rows])
        assert len(table.splitlines()) == 6


class TestCommandLine:
    def test_two_runs_give_identical_outputs(self, tmp_path, restore_root_logger):
        outputs = []
        for name in ("a", "b"):
            root = tmp_path / name
            root.mkdir()
            dataset = root / "synth.motd"
            config_path = root / "tiny.yaml"
            config = short_run_config(schedule__steps=6, data__dataset=str(dataset))
            config_path.write_text(render(config), encoding="utf-8")
            out = root / "run"
            assert cli.main(["gen", "--config", str(config_path)]) == EXIT_OK
            assert cli.main(["train", "--config", str(config_path), "--out", str(out)]) == EXIT_OK
            ckpt = str(out / "final.moth")
            assert cli.main(["eval", "--ckpt", ckpt, "--out", str(out)]) == EXIT_OK
            outputs.append(
                (
                    dataset.read_bytes(),
                    json.loads((out / "eval-held-out-layout.json").read_text()),
                )
            )
        assert outputs[0][0] == outputs[1][0]
        assert outputs[0][1] == outputs[1][1]
