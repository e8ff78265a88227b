"""Component ablation: train and evaluate the four cumulative configurations."""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..builders.batch_builder import ActionNormalization
from ..config import AblationFlags, RunConfig, ablation_name, apply_ablation
from ..logging import logger
from ..model.policy import MotHraPolicy
from ..synth.world import Episode
from .evaluation import HAND_COLUMNS, MotionEvalReport, evaluate_clips
from .trainer import TrainerService

VARIANTS: tuple[tuple[str, AblationFlags], ...] = (
    ("baseline", AblationFlags(no_traj3d=True, no_intention=True, no_insulation=True)),
    ("+traj3d", AblationFlags(no_intention=True, no_insulation=True)),
    ("+intention", AblationFlags(no_insulation=True)),
    ("+insulation", AblationFlags()),
)


@dataclass
class AblationRow:
    variant: str
    flags: AblationFlags
    report: MotionEvalReport
    seed_reports: list[MotionEvalReport]


def _mean_or_none(values: Sequence[float | None]) -> float | None:
    if any(v is None for v in values):
        return None
    return float(np.mean([float(v) for v in values if v is not None]))


def average_reports(reports: Sequence[MotionEvalReport]) -> MotionEvalReport:
    """Seed-mean of every column; a column missing from any report stays missing."""
    if not reports:
        raise ValueError("no reports to average")
    first = reports[0]
    hand = {name: _mean_or_none([getattr(r, name) for r in reports]) for name in HAND_COLUMNS}
    accuracies = [r.waypoint_accuracy for r in reports]
    accuracy = (
        None
        if any(a is None for a in accuracies)
        else np.mean([a for a in accuracies if a is not None], axis=0)
    )
    action_rmse = np.mean([r.action_rmse for r in reports], axis=0)
    return MotionEvalReport(
        split=first.split,
        clip_ids=list(first.clip_ids),
        generations_per_clip=first.generations_per_clip,
        per_clip=None,
        action_rmse=action_rmse,
        gripper_rmse=float(np.mean([r.gripper_rmse for r in reports])),
        waypoint_accuracy=accuracy,
        extra={"seeds": len(reports)},
        **hand,
    )


def variant_config(config: RunConfig, flags: AblationFlags, seed_index: int) -> RunConfig:
    seeded = dataclasses.replace(
        config, seed=dataclasses.replace(config.seed, root=config.seed.root + seed_index)
    )
    return apply_ablation(seeded, flags)


def run_ablation(
    config: RunConfig,
    episodes: Sequence[Episode],
    normalization: ActionNormalization,
    clips: Sequence[Episode],
    seeds: int | None = None,
    steps: int | None = None,
    checkpoint_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Train every variant on the same data and seeds, evaluate its EMA weights on ``clips``."""
    n_seeds = config.eval.ablation_seeds if seeds is None else seeds
    rows: list[AblationRow] = []
    for variant, flags in VARIANTS:
        seed_reports: list[MotionEvalReport] = []
        for s in range(n_seeds):
            cfg = variant_config(config, flags, s)
            target = None
            if checkpoint_dir is not None:
                target = Path(checkpoint_dir) / variant.lstrip("+") / f"seed-{s}"
            trainer = TrainerService(cfg, episodes, normalization, run_id=f"ablate-{variant}-{s}")
            trainer.train(steps=steps, checkpoint_dir=target)
            policy = MotHraPolicy(cfg, trainer.ema_params())
            seed_reports.append(evaluate_clips(policy, clips, normalization))
        report = average_reports(seed_reports)
        rows.append(
            AblationRow(variant=variant, flags=flags, report=report, seed_reports=seed_reports)
        )
        logger.info(
            "Ablation variant finished",
            component="ablation",
            split=report.split,
            event="ablation_row",
            variant=variant,
            ablation=ablation_name(flags),
            **{k: v for k, v in report.summary().items() if k != "split"},
        )
    return rows
