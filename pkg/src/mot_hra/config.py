"""Run configuration: a frozen dataclass tree with a lossless YAML form."""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .constants import (
    ABLATION_NO_INSULATION,
    ABLATION_NO_INTENTION,
    ABLATION_NO_TRAJ3D,
    ABLATION_NONE,
    ABLATIONS,
    N_COLORS,
    N_SHAPES,
    TEXT_VOCAB_SIZE,
)


class ConfigError(Exception):
    """Raised when a configuration file or override is invalid."""

    pass


@dataclass(frozen=True)
class TrunkConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    ffn_mult: int = 4
    insulate: bool = True


@dataclass(frozen=True)
class ModelConfig:
    horizon: int = 15
    bins: int = 256
    coord_range: tuple[float, float] = (-1.0, 1.0)
    n_img_tokens: int = 4
    n_text_tokens: int = 4
    action_dim: int = 7
    text_vocab: int = TEXT_VOCAB_SIZE
    n_shapes: int = N_SHAPES
    n_colors: int = N_COLORS
    init_std: float = 0.02
    dtype: str = "float32"


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2.5e-5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-10
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    ema_warmup: bool = False


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 2000
    warmup_steps: int = 100
    batch_size: int = 64
    checkpoint_every: int = 500


@dataclass(frozen=True)
class LossWeights:
    lambda_3d: float = 1.0
    lambda_m: float = 1.0
    lambda_a: float = 1.0


@dataclass(frozen=True)
class SamplingConfig:
    cfg_scale: float = 6.0
    flow_steps: int = 10
    instruction_dropout: float = 0.1
    waypoint_mode: str = "greedy"
    temperature: float = 1.0


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "data/synth.motd"
    train_latents: int = 4000
    eval_episodes: int = 200
    human_fraction: float = 0.5
    short_clip_fraction: float = 0.0
    held_out_combinations: int = 8
    held_out_region: float = 0.2


@dataclass(frozen=True)
class SeedConfig:
    root: int = 0


@dataclass(frozen=True)
class EvalConfig:
    clips: int = 200
    generations: int = 5
    split: str = "held-out-layout"
    dtw_normalization: str = "path-length"
    ade_aggregation: str = "per-clip"
    ablation_seeds: int = 3


@dataclass(frozen=True)
class AblationFlags:
    no_traj3d: bool = False
    no_intention: bool = False
    no_insulation: bool = False


@dataclass(frozen=True)
class RunConfig:
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: SeedConfig = field(default_factory=SeedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)


_CHOICES: dict[str, tuple[str, ...]] = {
    "model.dtype": ("float32", "float64"),
    "sampling.waypoint_mode": ("greedy", "sample"),
    "eval.split": ("train", "held-out-instruction", "held-out-layout"),
    "eval.dtw_normalization": ("path-length", "none"),
    "eval.ade_aggregation": ("per-clip", "global"),
}


def to_dict(config: Any) -> dict[str, Any]:
    """Plain nested dict of builtin types (tuples become lists)."""
    out: dict[str, Any] = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def _coerce(path: str, hint: Any, value: Any) -> Any:
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if typing.get_origin(hint) is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, list | tuple) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} values, got {value!r}")
        pairs = zip(args, value, strict=True)
        return tuple(_coerce(f"{path}[{i}]", a, v) for i, (a, v) in enumerate(pairs))
    raise ConfigError(f"{path}: unsupported field type {hint!r}")


def _from_dict(cls: Any, data: Any, prefix: str) -> Any:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key: {prefix}{key}")
    kwargs: dict[str, Any] = {}
    for name in known:
        if name not in data:
            continue
        hint = hints[name]
        path = f"{prefix}{name}"
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _from_dict(hint, data[name], f"{path}.")
        else:
            kwargs[name] = _coerce(path, hint, data[name])
    return cls(**kwargs)


def validate(config: RunConfig) -> RunConfig:
    """Check cross-field constraints; return the config unchanged."""
    t, m = config.trunk, config.model
    if t.depth < 1 or t.width < 1 or t.heads < 1 or t.ffn_mult < 1:
        raise ConfigError(f"trunk extents must be positive: {t}")
    if t.width % t.heads != 0:
        raise ConfigError(f"trunk.width {t.width} is not divisible by trunk.heads {t.heads}")
    if m.horizon < 1 or m.n_img_tokens < 1 or m.n_text_tokens < 1 or m.action_dim < 1:
        raise ConfigError("model.horizon, token counts and action_dim must be positive")
    if m.bins < 2:
        raise ConfigError(f"model.bins must be at least 2, got {m.bins}")
    lo, hi = m.coord_range
    if not lo < hi:
        raise ConfigError(f"model.coord_range must satisfy lo < hi, got {m.coord_range}")
    if config.sampling.flow_steps < 1:
        raise ConfigError("sampling.flow_steps must be at least 1")
    if not 0.0 <= config.sampling.instruction_dropout <= 1.0:
        raise ConfigError("sampling.instruction_dropout must lie in [0, 1]")
    if config.schedule.steps < 1 or config.schedule.batch_size < 1:
        raise ConfigError("schedule.steps and schedule.batch_size must be positive")
    if config.schedule.warmup_steps < 0 or config.schedule.warmup_steps > config.schedule.steps:
        raise ConfigError("schedule.warmup_steps must lie in [0, schedule.steps]")
    if not 0.0 <= config.optim.ema_decay < 1.0:
        raise ConfigError("optim.ema_decay must lie in [0, 1)")
    for name in ("lambda_3d", "lambda_m", "lambda_a"):
        if getattr(config.loss, name) < 0:
            raise ConfigError(f"loss.{name} must be non-negative")
    if not 0.0 <= config.data.human_fraction <= 1.0:
        raise ConfigError("data.human_fraction must lie in [0, 1]")
    if not 0.0 <= config.data.short_clip_fraction <= 1.0:
        raise ConfigError("data.short_clip_fraction must lie in [0, 1]")
    if config.data.held_out_region < 0:
        raise ConfigError("data.held_out_region must be non-negative")
    if config.eval.generations < 1 or config.eval.clips < 1:
        raise ConfigError("eval.generations and eval.clips must be positive")
    for path, choices in _CHOICES.items():
        section, name = path.split(".")
        value = getattr(getattr(config, section), name)
        if value not in choices:
            raise ConfigError(f"{path} must be one of {choices}, got {value!r}")
    return config


def render(config: RunConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=True, default_flow_style=False)


def parse(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return validate(_from_dict(RunConfig, data, ""))


def load_config(path: str | Path | None) -> RunConfig:
    """Read a YAML config file; ``None`` yields the defaults."""
    if path is None:
        return validate(RunConfig())
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse(p.read_text(encoding="utf-8"))


def config_digest(config: RunConfig) -> str:
    return hashlib.sha256(render(config).encode("utf-8")).hexdigest()


def with_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply dotted-path overrides such as ``{"sampling.cfg_scale": 3.0}``.

    ``None`` values are skipped, so unset CLI flags leave the file value in place.
    """
    data = to_dict(config)
    for path, value in overrides.items():
        if value is None:
            continue
        section, _, name = path.partition(".")
        if section not in data or name not in data[section]:
            raise ConfigError(f"unknown config key: {path}")
        data[section][name] = list(value) if isinstance(value, tuple) else value
    return validate(_from_dict(RunConfig, data, ""))


def ablation_flags(name: str) -> AblationFlags:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
    return AblationFlags(
        no_traj3d=name == ABLATION_NO_TRAJ3D,
        no_intention=name == ABLATION_NO_INTENTION,
        no_insulation=name == ABLATION_NO_INSULATION,
    )


def apply_ablation(config: RunConfig, flags: AblationFlags | None = None) -> RunConfig:
    """Return the effective config: disabled components get zero loss weight.

    ``no_intention`` forces ``lambda_m = 0``, ``no_traj3d`` forces ``lambda_3d = 0`` and
    ``no_insulation`` turns the trunk's insulation off.
    """
    flags = flags or config.ablation
    loss = config.loss
    trunk = config.trunk
    if flags.no_intention:
        loss = dataclasses.replace(loss, lambda_m=0.0)
    if flags.no_traj3d:
        loss = dataclasses.replace(loss, lambda_3d=0.0)
    if flags.no_insulation:
        trunk = dataclasses.replace(trunk, insulate=False)
    return dataclasses.replace(config, ablation=flags, loss=loss, trunk=trunk)


def ablation_name(flags: AblationFlags) -> str:
    """Comma-joined names of the disabled components, or ``none``."""
    names = [
        name
        for name, on in (
            (ABLATION_NO_TRAJ3D, flags.no_traj3d),
            (ABLATION_NO_INTENTION, flags.no_intention),
            (ABLATION_NO_INSULATION, flags.no_insulation),
        )
        if on
    ]
    return ",".join(names) if names else ABLATION_NONE
