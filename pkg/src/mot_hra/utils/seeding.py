from __future__ import annotations

import hashlib

import numpy as np

from ..constants import RANDOM_STREAMS


def derive_seed(root: int, stream: str, index: int | str | None = None) -> int:
    """Return a stable 63-bit seed for ``stream`` (and optional ``index``) under ``root``."""
    salt = stream if index is None else f"{stream}:{index}"
    h = hashlib.sha256(f"{root}:{salt}".encode()).digest()
    # Use first 8 bytes for an integer value
    return int.from_bytes(h[:8], "big") >> 1


def stream_rng(root: int, stream: str, index: int | str | None = None) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stream, index))


def stream_seeds(root: int) -> dict[str, int]:
    """Seeds of every named stream, as recorded in the run header."""
    return {name: derive_seed(root, name) for name in RANDOM_STREAMS}
