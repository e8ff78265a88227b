"""Multi-generation evaluation of hand motion, action chunks and waypoint plans."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..builders.batch_builder import ActionNormalization, collate
from ..config import EvalConfig, RunConfig
from ..constants import STREAM_EVAL, WRIST_DIM
from ..logging import logger
from ..metrics import EVAL_CLIPS_TOTAL
from ..model.fine_expert import ChunkPrediction, predict_chunk
from ..model.policy import MotHraPolicy
from ..model.vl_expert import waypoint_accuracy
from ..synth.world import Episode
from ..utils.motion import ade, dtw_alignment, joint_rot_error, wrist_rot_error
from ..utils.quantize import quantize_points
from ..utils.seeding import derive_seed
from .checkpoint import Checkpoint

HAND_COLUMNS = ("ade_m", "dtw_m", "rot_deg", "joint_rot_deg")
TABLE_COLUMNS = (
    ("ADE (m)", "ade_m"),
    ("DTW (m)", "dtw_m"),
    ("Rot (deg)", "rot_deg"),
    ("Joint-Rot (deg)", "joint_rot_deg"),
    ("Act-RMSE", "action_rmse_mean"),
    ("Grip-RMSE", "gripper_rmse"),
    ("WP-Acc", "waypoint_accuracy_mean"),
)


@dataclass
class MotionEvalReport:
    """Per-clip hand metrics (``clips x generations``) plus control and plan columns.

    Hand and plan columns are ``None`` for layouts without the matching span.
    """

    split: str
    clip_ids: list[int]
    generations_per_clip: int
    per_clip: dict[str, np.ndarray] | None
    ade_m: float | None
    dtw_m: float | None
    rot_deg: float | None
    joint_rot_deg: float | None
    action_rmse: np.ndarray
    gripper_rmse: float
    waypoint_accuracy: np.ndarray | None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def action_rmse_mean(self) -> float:
        return float(np.mean(self.action_rmse))

    @property
    def waypoint_accuracy_mean(self) -> float | None:
        if self.waypoint_accuracy is None:
            return None
        return float(np.mean(self.waypoint_accuracy))

    def summary(self) -> dict[str, Any]:
        """Flat, JSON-ready columns."""
        out: dict[str, Any] = {
            "split": self.split,
            "clips": len(self.clip_ids),
            "generations_per_clip": self.generations_per_clip,
        }
        for name in HAND_COLUMNS:
            out[name] = getattr(self, name)
        out["action_rmse"] = [float(v) for v in self.action_rmse]
        out["action_rmse_mean"] = self.action_rmse_mean
        out["gripper_rmse"] = self.gripper_rmse
        out["waypoint_accuracy"] = (
            None if self.waypoint_accuracy is None else [float(v) for v in self.waypoint_accuracy]
        )
        out["waypoint_accuracy_mean"] = self.waypoint_accuracy_mean
        out.update(self.extra)
        return out

    def to_json(self) -> dict[str, Any]:
        out = self.summary()
        out["clip_ids"] = list(self.clip_ids)
        if self.per_clip is not None:
            out["per_clip"] = {k: v.tolist() for k, v in self.per_clip.items()}
        return out


def _valid_length(episode: Episode) -> int:
    if episode.hand_valid is None:
        return int(episode.waypoints.shape[0])
    return max(int(np.sum(episode.hand_valid)), 1)


def clip_hand_metrics(
    pred_hand: np.ndarray, episode: Episode, config: EvalConfig
) -> dict[str, float]:
    """ADE, DTW, wrist and joint rotation error of one generated hand sequence.

    The ground truth is cut to its valid frames; ADE truncates the prediction to match.
    """
    if episode.hand is None:
        raise ValueError(f"episode {episode.episode_id} has no ground-truth hand states")
    gt = episode.hand[: _valid_length(episode)]
    pred_pos, gt_pos = pred_hand[:, :3], gt[:, :3]
    n = min(len(pred_pos), len(gt_pos))
    dists = np.linalg.norm(pred_pos[:n] - gt_pos[:n], axis=-1)
    cost, path_len = dtw_alignment(pred_pos, gt_pos)
    return {
        "ade_m": ade(pred_pos, gt_pos, truncate=True),
        "ade_sum": float(np.sum(dists)),
        "ade_count": float(n),
        "dtw_m": cost / path_len if config.dtw_normalization == "path-length" else cost,
        "rot_deg": wrist_rot_error(pred_hand, gt),
        "joint_rot_deg": joint_rot_error(pred_hand, gt),
    }


def score_generations(
    clips: Sequence[Episode],
    predictions: Sequence[ChunkPrediction],
    normalization: ActionNormalization,
    config: EvalConfig,
    *,
    bins: int,
    coord_range: tuple[float, float],
    split: str | None = None,
) -> MotionEvalReport:
    """Score one :class:`ChunkPrediction` per generation, each covering every clip in order.

    Hand means run over clips and then over generations. Action RMSE is per dimension in
    normalized units over every clip, generation and timestep.
    """
    if not clips:
        raise ValueError("no clips to evaluate")
    if not predictions:
        raise ValueError("no generations to score")
    n_clips, n_gens = len(clips), len(predictions)
    with_hand = all(p.hand is not None for p in predictions)
    with_plan = all(p.plan_bins is not None for p in predictions)

    per_clip: dict[str, np.ndarray] | None = None
    hand_means: dict[str, float | None] = dict.fromkeys(HAND_COLUMNS)
    if with_hand:
        keys = (*HAND_COLUMNS, "ade_sum", "ade_count")
        grid = {k: np.zeros((n_clips, n_gens)) for k in keys}
        for g, pred in enumerate(predictions):
            assert pred.hand is not None
            for c, clip in enumerate(clips):
                for k, v in clip_hand_metrics(pred.hand[c], clip, config).items():
                    grid[k][c, g] = v
        for k in HAND_COLUMNS:
            hand_means[k] = float(np.mean(np.mean(grid[k], axis=0)))
        if config.ade_aggregation == "global":
            hand_means["ade_m"] = float(
                np.mean(grid["ade_sum"].sum(axis=0) / grid["ade_count"].sum(axis=0))
            )
        per_clip = {k: grid[k] for k in HAND_COLUMNS}

    gt_actions = np.stack([normalization.normalize(_require_actions(c)) for c in clips])
    sq = np.stack([(np.asarray(p.actions, np.float64) - gt_actions) ** 2 for p in predictions])
    action_rmse = np.sqrt(sq.reshape(-1, sq.shape[-1]).mean(axis=0))

    accuracy = None
    if with_plan:
        gt_bins = quantize_points(np.stack([c.waypoints for c in clips]), coord_range, bins)
        plans = [p.plan_bins for p in predictions if p.plan_bins is not None]
        accuracy = np.mean([waypoint_accuracy(plan, gt_bins) for plan in plans], axis=0)

    return MotionEvalReport(
        split=split or clips[0].split,
        clip_ids=[c.episode_id for c in clips],
        generations_per_clip=n_gens,
        per_clip=per_clip,
        ade_m=hand_means["ade_m"],
        dtw_m=hand_means["dtw_m"],
        rot_deg=hand_means["rot_deg"],
        joint_rot_deg=hand_means["joint_rot_deg"],
        action_rmse=action_rmse,
        gripper_rmse=float(action_rmse[-1]),
        waypoint_accuracy=accuracy,
    )


def _require_actions(episode: Episode) -> np.ndarray:
    if episode.actions is None:
        raise ValueError(f"episode {episode.episode_id} has no ground-truth actions")
    return episode.actions


def generation_seeds(root: int, generations: int) -> list[int]:
    return [derive_seed(root, STREAM_EVAL, g) for g in range(generations)]


def evaluate_clips(
    policy: MotHraPolicy,
    clips: Sequence[Episode],
    normalization: ActionNormalization,
    generations: int | None = None,
    seeds: Sequence[int] | None = None,
) -> MotionEvalReport:
    """Run the full inference pipeline once per seed over all clips and score it.

    The inference inputs are the scene and instruction only.
    """
    config = policy.config
    seeds = list(seeds) if seeds is not None else generation_seeds(
        config.seed.root, generations or config.eval.generations
    )
    m = config.model
    inputs = collate(
        list(clips),
        n_img=m.n_img_tokens,
        n_txt=m.n_text_tokens,
        horizon=m.horizon,
        bins=m.bins,
        coord_range=m.coord_range,
        action_dim=m.action_dim,
        require_supervision=False,
    )
    predictions = [predict_chunk(policy, inputs.scene, inputs.text, seed) for seed in seeds]
    report = score_generations(
        clips,
        predictions,
        normalization,
        config.eval,
        bins=m.bins,
        coord_range=m.coord_range,
    )
    EVAL_CLIPS_TOTAL.labels(split=report.split).inc(len(clips))
    logger.info(
        "Evaluation finished",
        component="evaluation",
        split=report.split,
        event="eval_report",
        **{k: v for k, v in report.summary().items() if k != "split"},
    )
    return report


def policy_from_checkpoint(
    checkpoint: Checkpoint, use_ema: bool = True, config: RunConfig | None = None
) -> MotHraPolicy:
    """Policy carrying the checkpoint's EMA weights (or raw weights when asked or absent)."""
    cfg = config or checkpoint.config
    policy = MotHraPolicy.initialize(cfg)
    policy.params.load_arrays(checkpoint.inference_params() if use_ema else checkpoint.params)
    return policy


def _cell(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def format_table(rows: Sequence[tuple[str, MotionEvalReport]]) -> str:
    """Fixed-width text table with one row per named report."""
    headers = ["config", *(label for label, _ in TABLE_COLUMNS)]
    body = [
        [name, *(_cell(getattr(report, attr)) for _, attr in TABLE_COLUMNS)]
        for name, report in rows
    ]
    widths = [max(len(str(r[i])) for r in [headers, *body]) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths, strict=True))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths, strict=True)))
    return "\n".join(lines)
