"""Binary dataset files: header, length-prefixed episode records, offset index, checksum.

Layout (all integers little-endian)::

    b"MOTD" | u32 version | u32 header length | header JSON
    record* (u32 length | u32 meta length | meta JSON | float64/int64/uint8 arrays)
    u64 offset per record | u64 index offset | sha256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from ..builders.batch_builder import ActionNormalization
from ..constants import DATASET_MAGIC, DATASET_VERSION, HAND_DIM
from ..logging import logger
from ..synth.world import Episode, Instruction, Scene

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_DIGEST_SIZE = 32


class DataError(Exception):
    """Raised when a dataset or checkpoint file cannot be used."""

    pass


class DatasetVersionError(DataError):
    """Raised when a dataset file has an unsupported format version."""

    pass


class DatasetChecksumError(DataError):
    """Raised when a dataset file's trailing checksum does not match its contents."""

    pass


class DatasetFormatError(DataError):
    """Raised when a dataset file is truncated or structurally invalid."""

    pass


@dataclass(frozen=True)
class DatasetHeader:
    horizon: int
    bins: int
    coord_range: tuple[float, float]
    action_dim: int
    n_img_tokens: int
    n_text_tokens: int
    normalization: ActionNormalization
    episode_count: int
    seed: int
    held_out: tuple[tuple[int, int, int], ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "version": DATASET_VERSION,
            "horizon": self.horizon,
            "bins": self.bins,
            "coord_range": list(self.coord_range),
            "action_dim": self.action_dim,
            "n_img_tokens": self.n_img_tokens,
            "n_text_tokens": self.n_text_tokens,
            "action_mean": [float(x) for x in self.normalization.mean],
            "action_std": [float(x) for x in self.normalization.std],
            "episode_count": self.episode_count,
            "seed": self.seed,
            "held_out": [list(c) for c in self.held_out],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> DatasetHeader:
        try:
            return cls(
                horizon=int(data["horizon"]),
                bins=int(data["bins"]),
                coord_range=(float(data["coord_range"][0]), float(data["coord_range"][1])),
                action_dim=int(data["action_dim"]),
                n_img_tokens=int(data["n_img_tokens"]),
                n_text_tokens=int(data["n_text_tokens"]),
                normalization=ActionNormalization(
                    mean=np.asarray(data["action_mean"], dtype=np.float64),
                    std=np.asarray(data["action_std"], dtype=np.float64),
                ),
                episode_count=int(data["episode_count"]),
                seed=int(data["seed"]),
                held_out=tuple(tuple(int(v) for v in c) for c in data.get("held_out", [])),
            )
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise DatasetFormatError(f"invalid dataset header: {e}") from e


def _array_bytes(value: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(value, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def encode_episode(episode: Episode) -> bytes:
    """One record body (without its length prefix)."""
    scene = episode.scene
    meta = {
        "episode_id": episode.episode_id,
        "latent_id": episode.latent_id,
        "split": episode.split,
        "instruction": list(episode.instruction.combination),
        "n_objects": scene.n_objects,
        "horizon": int(episode.waypoints.shape[0]),
        "has_hand": episode.has_hand,
        "has_actions": episode.has_actions,
        "action_dim": 0 if episode.actions is None else int(episode.actions.shape[1]),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [
        _U32.pack(len(meta_bytes)),
        meta_bytes,
        _array_bytes(scene.positions, "f8"),
        _array_bytes(scene.shapes, "i8"),
        _array_bytes(scene.colors, "i8"),
        _array_bytes(episode.waypoints, "f8"),
    ]
    if episode.hand is not None:
        valid = (
            episode.hand_valid
            if episode.hand_valid is not None
            else np.ones(episode.hand.shape[0], dtype=bool)
        )
        parts.append(_array_bytes(episode.hand, "f8"))
        parts.append(_array_bytes(valid, "u1"))
    if episode.actions is not None:
        parts.append(_array_bytes(episode.actions, "f8"))
    return b"".join(parts)


class _Cursor:
    def __init__(self, buf: bytes, pos: int, end: int) -> None:
        self.buf = buf
        self.pos = pos
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise DatasetFormatError(f"record truncated at byte {self.pos} (needs {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def array(self, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape).copy()


def decode_episode(buf: bytes, start: int = 0, end: int | None = None) -> Episode:
    cur = _Cursor(buf, start, len(buf) if end is None else end)
    (meta_len,) = _U32.unpack(cur.take(_U32.size))
    try:
        meta = json.loads(cur.take(meta_len))
        k = int(meta["n_objects"])
        horizon = int(meta["horizon"])
        action_dim = int(meta["action_dim"])
        verb, shape, color = (int(v) for v in meta["instruction"])
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"invalid episode record: {e}") from e

    scene = Scene(
        positions=cur.array("f8", (k, 3)),
        shapes=cur.array("i8", (k,)).astype(np.int64),
        colors=cur.array("i8", (k,)).astype(np.int64),
    )
    waypoints = cur.array("f8", (horizon, 3))
    hand = hand_valid = actions = None
    if meta["has_hand"]:
        hand = cur.array("f8", (horizon, HAND_DIM))
        hand_valid = cur.array("u1", (horizon,)).astype(bool)
    if meta["has_actions"]:
        actions = cur.array("f8", (horizon, action_dim))
    if cur.pos != cur.end:
        raise DatasetFormatError(f"episode {meta['episode_id']}: {cur.end - cur.pos} stray bytes")
    return Episode(
        episode_id=int(meta["episode_id"]),
        latent_id=int(meta["latent_id"]),
        split=str(meta["split"]),
        scene=scene,
        instruction=Instruction(verb=verb, shape=shape, color=color),
        waypoints=waypoints,
        hand=hand,
        hand_valid=hand_valid,
        actions=actions,
    )


def write_dataset(path: str | Path, header: DatasetHeader, episodes: Sequence[Episode]) -> Path:
    if header.episode_count != len(episodes):
        raise DatasetFormatError(
            f"header announces {header.episode_count} episodes but {len(episodes)} were given"
        )
    header_bytes = json.dumps(header.to_json(), sort_keys=True).encode()
    out = bytearray()
    out += DATASET_MAGIC
    out += _U32.pack(DATASET_VERSION)
    out += _U32.pack(len(header_bytes))
    out += header_bytes

    offsets: list[int] = []
    for episode in episodes:
        body = encode_episode(episode)
        offsets.append(len(out))
        out += _U32.pack(len(body))
        out += body

    index_offset = len(out)
    for offset in offsets:
        out += _U64.pack(offset)
    out += _U64.pack(index_offset)
    out += hashlib.sha256(out).digest()

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(bytes(out))
    logger.info(
        "Dataset written",
        component="dataset",
        event="dataset_written",
        path=str(target),
        episodes=len(episodes),
        bytes=len(out),
    )
    return target


class DatasetReader:
    """Validated, random-access view of a dataset file held in memory.

    Checks run in order: magic, version, checksum, structure.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        try:
            buf = self.path.read_bytes()
        except OSError as e:
            raise DataError(f"cannot read dataset {self.path}: {e}") from e
        self._buf = buf

        prefix = len(DATASET_MAGIC) + 2 * _U32.size
        if len(buf) < prefix or buf[: len(DATASET_MAGIC)] != DATASET_MAGIC:
            raise DatasetFormatError(f"{self.path} is not a dataset file (bad magic)")
        (version,) = _U32.unpack_from(buf, len(DATASET_MAGIC))
        if version != DATASET_VERSION:
            raise DatasetVersionError(
                f"{self.path}: format version {version}, expected {DATASET_VERSION}"
            )
        if len(buf) < prefix + _U64.size + _DIGEST_SIZE:
            raise DatasetFormatError(f"{self.path} is truncated")
        body, digest = buf[:-_DIGEST_SIZE], buf[-_DIGEST_SIZE:]
        if hashlib.sha256(body).digest() != digest:
            raise DatasetChecksumError(f"{self.path}: checksum mismatch")

        (header_len,) = _U32.unpack_from(buf, len(DATASET_MAGIC) + _U32.size)
        try:
            header_json = json.loads(buf[prefix : prefix + header_len])
        except ValueError as e:
            raise DatasetFormatError(f"{self.path}: unreadable header: {e}") from e
        self.header = DatasetHeader.from_json(header_json)

        (index_offset,) = _U64.unpack_from(body, len(body) - _U64.size)
        count = self.header.episode_count
        if index_offset + count * _U64.size != len(body) - _U64.size:
            raise DatasetFormatError(
                f"{self.path}: offset index at {index_offset} does not hold {count} entries"
            )
        self._offsets = [
            _U64.unpack_from(body, index_offset + i * _U64.size)[0] for i in range(count)
        ]
        self._index_offset = index_offset

    def __len__(self) -> int:
        return len(self._offsets)

    def episode(self, index: int) -> Episode:
        if not 0 <= index < len(self._offsets):
            raise IndexError(f"episode index {index} out of range [0, {len(self._offsets)})")
        start = self._offsets[index]
        if start + _U32.size > self._index_offset:
            raise DatasetFormatError(f"{self.path}: record {index} starts past the records")
        (length,) = _U32.unpack_from(self._buf, start)
        end = start + _U32.size + length
        if end > self._index_offset:
            raise DatasetFormatError(f"{self.path}: record {index} overruns the index")
        return decode_episode(self._buf, start + _U32.size, end)

    def __iter__(self) -> Iterator[Episode]:
        for i in range(len(self._offsets)):
            yield self.episode(i)

    def episodes(self, split: str | None = None) -> list[Episode]:
        return [e for e in self if split is None or e.split == split]


def read_dataset(path: str | Path) -> tuple[DatasetHeader, list[Episode]]:
    reader = DatasetReader(path)
    return reader.header, list(reader)
