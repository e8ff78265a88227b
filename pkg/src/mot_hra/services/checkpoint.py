"""Checkpoint files: named parameter tables plus optional optimizer and EMA sections.

Layout (all integers little-endian)::

    b"MOTH" | u32 version | u32 meta length | meta JSON (config digest, step, config)
    u32 section count
    per section: u32 name length | name | u32 entry count
    per entry:   u32 name length | name | 2-byte dtype tag | u32 ndim | u32 dims | data
    sha256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import ConfigError, RunConfig, config_digest, parse, render
from ..constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from ..logging import logger
from .dataset import DataError

_U32 = struct.Struct("<I")
_DIGEST_SIZE = 32
_DTYPE_TAGS = {np.dtype(np.float32): b"f4", np.dtype(np.float64): b"f8"}
_TAG_DTYPES = {tag: dt.newbyteorder("<") for dt, tag in _DTYPE_TAGS.items()}

SECTION_PARAMS = "params"
SECTION_ADAM_M = "adam_m"
SECTION_ADAM_V = "adam_v"
SECTION_EMA = "ema"


class CheckpointError(DataError):
    """Raised when a checkpoint file cannot be used."""

    pass


class CheckpointChecksumError(CheckpointError):
    """Raised when a checkpoint's trailing checksum does not match its contents."""

    pass


class CheckpointVersionError(CheckpointError):
    """Raised when a checkpoint has an unsupported format version."""

    pass


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None
    ema: dict[str, np.ndarray] | None = None
    optimizer_step: int = 0
    ema_updates: int = 0
    digest: str = field(default="")

    def sections(self) -> dict[str, dict[str, np.ndarray]]:
        out = {SECTION_PARAMS: self.params}
        for name, table in (
            (SECTION_ADAM_M, self.adam_m),
            (SECTION_ADAM_V, self.adam_v),
            (SECTION_EMA, self.ema),
        ):
            if table is not None:
                out[name] = table
        return out

    def inference_params(self) -> dict[str, np.ndarray]:
        """EMA shadows when present, otherwise the raw parameters."""
        return self.ema if self.ema is not None else self.params


def _pack_str(value: str) -> bytes:
    raw = value.encode()
    return _U32.pack(len(raw)) + raw


def _encode_entry(name: str, value: np.ndarray) -> bytes:
    dtype = np.dtype(value.dtype)
    if dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"{name}: cannot store dtype {dtype}")
    le = np.ascontiguousarray(value, dtype=dtype.newbyteorder("<"))
    dims = b"".join(_U32.pack(d) for d in le.shape)
    return _pack_str(name) + _DTYPE_TAGS[dtype] + _U32.pack(le.ndim) + dims + le.tobytes()


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    digest = config_digest(checkpoint.config)
    meta = {
        "config_digest": digest,
        "step": checkpoint.step,
        "optimizer_step": checkpoint.optimizer_step,
        "ema_updates": checkpoint.ema_updates,
        "config": render(checkpoint.config),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += _U32.pack(CHECKPOINT_VERSION)
    out += _U32.pack(len(meta_bytes))
    out += meta_bytes

    sections = checkpoint.sections()
    out += _U32.pack(len(sections))
    for section, table in sections.items():
        out += _pack_str(section)
        out += _U32.pack(len(table))
        for name, value in table.items():
            out += _encode_entry(name, value)
    out += hashlib.sha256(out).digest()

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(bytes(out))
    logger.info(
        "Checkpoint saved",
        component="checkpoint",
        event="checkpoint_saved",
        step=checkpoint.step,
        path=str(target),
        sections=list(sections),
        configDigest=digest,
    )
    return target


class _Reader:
    def __init__(self, buf: bytes, path: Path) -> None:
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return int(_U32.unpack(self.take(_U32.size))[0])

    def string(self) -> str:
        return self.take(self.u32()).decode()

    def entry(self) -> tuple[str, np.ndarray]:
        name = self.string()
        tag = self.take(2)
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{self.path}: {name} has unknown dtype tag {tag!r}")
        dtype = _TAG_DTYPES[tag]
        shape = tuple(self.u32() for _ in range(self.u32()))
        count = int(np.prod(shape))
        data = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        return name, data.astype(dtype.newbyteorder("="))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and validate a checkpoint. Checks run in order: magic, version, checksum."""
    target = Path(path)
    try:
        buf = target.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {target}: {e}") from e

    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{target} is not a checkpoint file (bad magic)")
    if len(buf) < len(CHECKPOINT_MAGIC) + _U32.size + _DIGEST_SIZE:
        raise CheckpointError(f"{target} is truncated")
    (version,) = _U32.unpack_from(buf, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{target}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    body, digest = buf[:-_DIGEST_SIZE], buf[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError(f"{target}: checksum mismatch")

    reader = _Reader(body, target)
    reader.take(len(CHECKPOINT_MAGIC) + _U32.size)
    try:
        meta = json.loads(reader.take(reader.u32()))
        config = parse(meta["config"])
        step = int(meta["step"])
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"{target}: unreadable metadata: {e}") from e
    if config_digest(config) != meta.get("config_digest"):
        raise CheckpointError(f"{target}: stored config does not match its digest")

    sections: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(reader.u32()):
        section = reader.string()
        sections[section] = dict(reader.entry() for _ in range(reader.u32()))
    if reader.pos != len(body):
        raise CheckpointError(f"{target}: {len(body) - reader.pos} stray bytes after sections")
    if SECTION_PARAMS not in sections:
        raise CheckpointError(f"{target}: no parameter section")

    logger.info(
        "Checkpoint loaded",
        component="checkpoint",
        event="checkpoint_loaded",
        step=step,
        path=str(target),
        sections=list(sections),
    )
    return Checkpoint(
        config=config,
        step=step,
        params=sections[SECTION_PARAMS],
        adam_m=sections.get(SECTION_ADAM_M),
        adam_v=sections.get(SECTION_ADAM_V),
        ema=sections.get(SECTION_EMA),
        optimizer_step=int(meta.get("optimizer_step", 0)),
        ema_updates=int(meta.get("ema_updates", 0)),
        digest=str(meta["config_digest"]),
    )
