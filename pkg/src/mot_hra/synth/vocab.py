"""Instruction vocabulary of the synthetic desk world."""

from __future__ import annotations

import numpy as np

from ..constants import N_COLORS, N_SHAPES, N_VERBS

PAD_TOKEN = 0

VERBS = ("reach", "grasp-lift", "push")
SHAPES = ("cube", "sphere", "cylinder", "cone")
COLORS = ("red", "green", "blue", "yellow")

VERB_OFFSET = 1
SHAPE_OFFSET = VERB_OFFSET + N_VERBS
COLOR_OFFSET = SHAPE_OFFSET + N_SHAPES


def all_combinations() -> list[tuple[int, int, int]]:
    """Every ``(verb, shape, color)`` index triple."""
    return [(v, s, c) for v in range(N_VERBS) for s in range(N_SHAPES) for c in range(N_COLORS)]


def encode_instruction(verb: int, shape: int, color: int, n_tokens: int) -> np.ndarray:
    if n_tokens < 3:
        raise ValueError(f"instructions need at least 3 tokens, got {n_tokens}")
    tokens = np.full(n_tokens, PAD_TOKEN, dtype=np.int64)
    tokens[:3] = (VERB_OFFSET + verb, SHAPE_OFFSET + shape, COLOR_OFFSET + color)
    return tokens


def decode_instruction(tokens: np.ndarray) -> tuple[int, int, int]:
    verb, shape, color = (int(t) for t in tokens[:3])
    return verb - VERB_OFFSET, shape - SHAPE_OFFSET, color - COLOR_OFFSET


def describe(verb: int, shape: int, color: int) -> str:
    return f"{VERBS[verb]} the {COLORS[color]} {SHAPES[shape]}"
