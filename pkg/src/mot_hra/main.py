from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from . import logging as structured_logging
from . import metrics
from .autograd import NumericError
from .builders.batch_builder import ActionNormalization, collate
from .config import (
    ConfigError,
    RunConfig,
    ablation_flags,
    apply_ablation,
    load_config,
    render,
    with_overrides,
)
from .constants import (
    ABLATIONS,
    EXIT_CONFIG_ERROR,
    EXIT_DATA_ERROR,
    EXIT_NUMERIC_FAILURE,
    EXIT_OK,
    SPLIT_HELD_OUT_INSTRUCTION,
    SPLIT_TRAIN,
    SPLITS,
)
from .logging import logger
from .model.fine_expert import predict_chunk
from .services.ablation import run_ablation
from .services.checkpoint import Checkpoint, load_checkpoint
from .services.dataset import DataError, DatasetHeader, DatasetReader, write_dataset
from .services.evaluation import evaluate_clips, format_table, policy_from_checkpoint
from .services.trainer import TrainerService
from .synth.vocab import describe
from .synth.world import Episode, SplitSpec, choose_held_out, generate_world, split_statistics
from .utils.quantize import dequantize_points

_SAMPLING_KEYS = (
    "sampling.cfg_scale",
    "sampling.flow_steps",
    "eval.split",
    "seed.root",
    "data.dataset",
)


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "seed.root": getattr(args, "seed", None),
        "schedule.steps": getattr(args, "steps", None),
        "data.dataset": getattr(args, "dataset", None),
        "eval.split": getattr(args, "split", None),
        "sampling.cfg_scale": getattr(args, "cfg_scale", None),
        "sampling.flow_steps": getattr(args, "flow_steps", None),
    }


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then command-line overrides (flags win), then ablation flags."""
    config = with_overrides(load_config(args.config), _overrides(args))
    name = getattr(args, "ablation", None)
    return apply_ablation(config, ablation_flags(name) if name else None)


def _checkpoint_config(checkpoint: Checkpoint, args: argparse.Namespace) -> RunConfig:
    """The checkpoint's config with only sampling-side overrides applied."""
    overrides = {k: v for k, v in _overrides(args).items() if k in _SAMPLING_KEYS}
    return with_overrides(checkpoint.config, overrides)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _open_dataset(config: RunConfig) -> DatasetReader:
    reader = DatasetReader(config.data.dataset)
    m, h = config.model, reader.header
    if (h.horizon, h.action_dim, h.bins) != (m.horizon, m.action_dim, m.bins):
        raise DataError(
            f"dataset {reader.path} was generated for horizon={h.horizon}, "
            f"action_dim={h.action_dim}, bins={h.bins}; config has horizon={m.horizon}, "
            f"action_dim={m.action_dim}, bins={m.bins}"
        )
    return reader


def cmd_gen(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    root = config.seed.root
    held_out = choose_held_out(root, config.data.held_out_combinations)
    spec = SplitSpec(
        horizon=config.model.horizon,
        held_out=held_out,
        short_clip_fraction=config.data.short_clip_fraction,
        held_out_region=config.data.held_out_region,
    )
    episodes = generate_world(config.data.train_latents, config.data.eval_episodes, spec, root)
    robot_chunks = [
        e.actions for e in episodes if e.split == SPLIT_TRAIN and e.actions is not None
    ]
    normalization = ActionNormalization.fit(robot_chunks)
    m = config.model
    header = DatasetHeader(
        horizon=m.horizon,
        bins=m.bins,
        coord_range=m.coord_range,
        action_dim=m.action_dim,
        n_img_tokens=m.n_img_tokens,
        n_text_tokens=m.n_text_tokens,
        normalization=normalization,
        episode_count=len(episodes),
        seed=root,
        held_out=tuple(sorted(held_out)),
    )
    write_dataset(config.data.dataset, header, episodes)

    stats = split_statistics(episodes)
    for split, kinds in stats.items():
        for kind, count in kinds.items():
            metrics.EPISODES_GENERATED_TOTAL.labels(split=split, kind=kind).inc(count)
    report = {
        "dataset": config.data.dataset,
        "episodes": stats,
        "held_out": [describe(*c) for c in sorted(held_out)],
        "held_out_region": config.data.held_out_region,
        "action_mean": [round(float(v), 6) for v in normalization.mean],
        "action_std": [round(float(v), 6) for v in normalization.std],
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    reader = _open_dataset(config)
    episodes = reader.episodes(SPLIT_TRAIN)
    out = _out_dir(args)
    (out / "config.yaml").write_text(render(config), encoding="utf-8")
    if args.ckpt:
        trainer = TrainerService.from_checkpoint(
            args.ckpt, episodes, reader.header.normalization, config=config
        )
    else:
        trainer = TrainerService(config, episodes, reader.header.normalization)
    history = trainer.train(steps=config.schedule.steps, checkpoint_dir=out)
    if history:
        last = history[-1]
        print(json.dumps({"step": last.step, **last.as_fields()}, indent=2))
    return EXIT_OK


def _eval_clips(reader: DatasetReader, config: RunConfig, split: str) -> list[Episode]:
    clips = reader.episodes(split)[: config.eval.clips]
    if not clips:
        raise DataError(f"dataset {reader.path} has no episodes in split {split!r}")
    return clips


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.ckpt:
        raise ConfigError("eval needs --ckpt")
    checkpoint = load_checkpoint(args.ckpt)
    config = _checkpoint_config(checkpoint, args)
    reader = _open_dataset(config)
    clips = _eval_clips(reader, config, config.eval.split)
    policy = policy_from_checkpoint(checkpoint, config=config)
    report = evaluate_clips(policy, clips, reader.header.normalization)
    _write_json(_out_dir(args) / f"eval-{config.eval.split}.json", report.to_json())
    print(format_table([(config.eval.split, report)]))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    reader = _open_dataset(config)
    split = args.split or SPLIT_HELD_OUT_INSTRUCTION
    clips = _eval_clips(reader, config, split)
    out = _out_dir(args)
    rows = run_ablation(
        config,
        reader.episodes(SPLIT_TRAIN),
        reader.header.normalization,
        clips,
        checkpoint_dir=out / "ablation",
    )
    _write_json(
        out / "ablation.json",
        [{"variant": r.variant, **r.report.summary()} for r in rows],
    )
    print(format_table([(r.variant, r.report) for r in rows]))
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    if not args.ckpt:
        raise ConfigError("sample needs --ckpt")
    checkpoint = load_checkpoint(args.ckpt)
    config = _checkpoint_config(checkpoint, args)
    reader = _open_dataset(config)
    matches = [e for e in reader if e.episode_id == args.episode]
    if not matches:
        raise DataError(f"no episode with id {args.episode} in {reader.path}")
    episode = matches[0]
    m = config.model
    batch = collate(
        [episode],
        n_img=m.n_img_tokens,
        n_txt=m.n_text_tokens,
        horizon=m.horizon,
        bins=m.bins,
        coord_range=m.coord_range,
        action_dim=m.action_dim,
        require_supervision=False,
    )
    policy = policy_from_checkpoint(checkpoint, config=config)
    pred = predict_chunk(policy, batch.scene, batch.text, config.seed.root)

    payload: dict[str, Any] = {
        "episode_id": episode.episode_id,
        "instruction": describe(*episode.instruction.combination),
        "seed": config.seed.root,
        "actions_normalized": pred.actions[0].tolist(),
        "actions": reader.header.normalization.denormalize(pred.actions[0]).tolist(),
    }
    if pred.plan_bins is not None:
        payload["waypoint_bins"] = pred.plan_bins[0].tolist()
        payload["waypoints"] = dequantize_points(pred.plan_bins[0], m.coord_range, m.bins).tolist()
    if pred.hand is not None:
        payload["hand"] = pred.hand[0].tolist()
    _write_json(_out_dir(args) / f"sample-{episode.episode_id}-{config.seed.root}.json", payload)
    print(json.dumps({k: payload[k] for k in ("episode_id", "instruction", "seed")}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mot-hra", description="Desk-scale three-expert manipulation policy"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--dataset", help="dataset file")
    common.add_argument("--out", help="output directory (default: runs)")
    common.add_argument("--metrics-file", help="write Prometheus metrics here on exit")
    common.add_argument("--log-file", help="also append JSON log lines to this file")
    common.add_argument("--log-level", default="INFO")

    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    gen.set_defaults(handler=cmd_gen)

    train = sub.add_parser("train", parents=[common], help="train a policy")
    train.add_argument("--steps", type=int)
    train.add_argument("--ckpt", help="resume from this checkpoint")
    train.add_argument("--ablation", choices=ABLATIONS)
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate.add_argument("--ckpt")
    evaluate.add_argument("--split", choices=SPLITS)
    evaluate.add_argument("--cfg-scale", type=float)
    evaluate.add_argument("--flow-steps", type=int)
    evaluate.set_defaults(handler=cmd_eval)

    ablate = sub.add_parser("ablate", parents=[common], help="train and compare ablations")
    ablate.add_argument("--steps", type=int)
    ablate.add_argument("--split", choices=SPLITS)
    ablate.set_defaults(handler=cmd_ablate)

    sample = sub.add_parser("sample", parents=[common], help="run inference on one episode")
    sample.add_argument("--ckpt")
    sample.add_argument("--episode", type=int, required=True)
    sample.add_argument("--cfg-scale", type=float)
    sample.add_argument("--flow-steps", type=int)
    sample.set_defaults(handler=cmd_sample)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), logging.INFO)
    structured_logging.setup_structured_logging(level=level, log_file=args.log_file)
    try:
        return int(args.handler(args))
    except ConfigError as e:
        logger.error(str(e), component="cli", event="failed", reason="ConfigError")
        return EXIT_CONFIG_ERROR
    except DataError as e:
        logger.error(str(e), component="cli", event="failed", reason=type(e).__name__)
        return EXIT_DATA_ERROR
    except NumericError as e:
        logger.error(str(e), component="cli", event="failed", reason=type(e).__name__)
        return EXIT_NUMERIC_FAILURE
    finally:
        if args.metrics_file:
            metrics.write_metrics_file(args.metrics_file)


if __name__ == "__main__":
    sys.exit(main())
