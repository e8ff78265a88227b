from __future__ import annotations

from pathlib import Path

from prometheus_client import REGISTRY, Counter, Gauge, Histogram, write_to_textfile

TRAIN_STEPS_TOTAL = Counter(
    "mot_hra_train_steps_total",
    "Number of optimizer steps taken",
    labelnames=("run",),
)

TRAIN_STEP_DURATION = Histogram(
    "mot_hra_train_step_duration_seconds",
    "Wall time of one joint training step in seconds",
    buckets=(0.05, 0.1, 0.25, 0.5, 1, 2, 5, 10, 30),
)

TRAIN_LOSS = Gauge(
    "mot_hra_train_loss",
    "Most recent value of each loss term",
    labelnames=("term",),
)

SAMPLING_DURATION = Histogram(
    "mot_hra_sampling_duration_seconds",
    "Duration of one inference stage in seconds",
    labelnames=("stage",),
    buckets=(0.01, 0.05, 0.1, 0.25, 0.5, 1, 2, 5, 10, 30),
)

EVAL_CLIPS_TOTAL = Counter(
    "mot_hra_eval_clips_total",
    "Number of clips evaluated",
    labelnames=("split",),
)

NUMERIC_FAILURES_TOTAL = Counter(
    "mot_hra_numeric_failures_total",
    "Number of non-finite values detected",
    labelnames=("stage",),
)

EPISODES_GENERATED_TOTAL = Counter(
    "mot_hra_episodes_generated_total",
    "Number of synthetic episodes generated",
    labelnames=("split", "kind"),
)


def write_metrics_file(path: str | Path) -> None:
    """Dump the default registry in text exposition format."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(target), REGISTRY)
