"""Procedural desk world with analytically known trajectories, hands and actions.

A latent episode is a scene, an instruction and one minimum-jerk wrist trajectory.
The same latent yields a human-style episode (hand states) and a robot-style
episode (action chunk); evaluation episodes carry both.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from ..constants import (
    N_COLORS,
    N_JOINTS,
    N_SHAPES,
    SPLIT_HELD_OUT_INSTRUCTION,
    SPLIT_HELD_OUT_LAYOUT,
    SPLIT_TRAIN,
    SPLITS,
)
from ..utils.quantize import quantize_points
from ..utils.quaternion import (
    canonicalize_quat,
    quat_conjugate,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_rotvec,
    slerp,
)
from ..utils.seeding import derive_seed
from .vocab import all_combinations, encode_instruction

HOME = np.array([0.0, -0.8, 0.5])
N_OBJECTS = 3
MIN_SEPARATION = 0.15
WORKSPACE_XY = 0.7
TABLE_Z = 0.05
NOISE_AMPLITUDE = 0.01
ACTION_DIM = 7
ORIENTATION_GAIN = 4.0
GRIPPER_GAIN = 3.0

# Terminal wrist offset from the target object per verb: reach, grasp-lift, push
TERMINAL_OFFSET = np.array(
    [
        [0.0, 0.0, 0.15],
        [0.0, 0.0, 0.02],
        [0.0, -0.12, 0.02],
    ]
)
PHASE_SCALE = (0.0, 1.0, 0.4)

WRIST_START = canonicalize_quat(quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), 0.3))
WRIST_END = canonicalize_quat(
    np.stack(
        [
            quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), 0.5),
            quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), 1.2),
            quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), 0.8),
        ]
    )
)


def _joint_pose(base_angle: float, step: float) -> np.ndarray:
    quats = []
    for j in range(N_JOINTS):
        axis = np.array([1.0, 0.1 * (j % 3), 0.05 * (j // 3)])
        quats.append(quat_from_axis_angle(axis, base_angle + step * j))
    return canonicalize_quat(np.stack(quats))


OPEN_POSE = _joint_pose(0.1, 0.02)
CLOSED_POSE = _joint_pose(1.1, 0.03)


class WorldError(ValueError):
    """Raised when a scene cannot be built or an instruction does not resolve."""

    pass


@dataclass(frozen=True, eq=False)
class Scene:
    positions: np.ndarray
    shapes: np.ndarray
    colors: np.ndarray

    @property
    def n_objects(self) -> int:
        return int(self.positions.shape[0])

    def resolve(self, instruction: Instruction) -> int:
        """Index of the single object matching the instruction's shape and color."""
        match = (self.shapes == instruction.shape) & (self.colors == instruction.color)
        hits = np.flatnonzero(match)
        if hits.size != 1:
            raise WorldError(
                f"instruction {instruction.combination} matches {hits.size} objects in the scene"
            )
        return int(hits[0])

    def tokens(self, n_img: int, coord_range: tuple[float, float], bins: int) -> np.ndarray:
        """``n_img x 5`` integer grid: shape id, color id, x/y/z bins per object.

        Ids are shifted by one so that 0 marks an empty slot.
        """
        if self.n_objects > n_img:
            raise WorldError(f"scene has {self.n_objects} objects but only {n_img} image tokens")
        grid = np.zeros((n_img, 5), dtype=np.int64)
        grid[: self.n_objects, 0] = self.shapes + 1
        grid[: self.n_objects, 1] = self.colors + 1
        grid[: self.n_objects, 2:] = quantize_points(self.positions, coord_range, bins)
        return grid


@dataclass(frozen=True)
class Instruction:
    verb: int
    shape: int
    color: int

    @property
    def combination(self) -> tuple[int, int, int]:
        return (self.verb, self.shape, self.color)

    def tokens(self, n_tokens: int) -> np.ndarray:
        return encode_instruction(self.verb, self.shape, self.color, n_tokens)


@dataclass(eq=False)
class Episode:
    episode_id: int
    latent_id: int
    split: str
    scene: Scene
    instruction: Instruction
    waypoints: np.ndarray
    hand: np.ndarray | None = None
    hand_valid: np.ndarray | None = None
    actions: np.ndarray | None = None

    @property
    def has_hand(self) -> bool:
        return self.hand is not None

    @property
    def has_actions(self) -> bool:
        return self.actions is not None

    @property
    def kind(self) -> str:
        if self.has_hand and self.has_actions:
            return "paired"
        return "human" if self.has_hand else "robot"


@dataclass(frozen=True)
class SplitSpec:
    horizon: int = 15
    held_out: frozenset[tuple[int, int, int]] = field(default_factory=frozenset)
    short_clip_fraction: float = 0.0
    held_out_region: float = 0.2


def min_jerk(tau: np.ndarray) -> np.ndarray:
    return 10.0 * tau**3 - 15.0 * tau**4 + 6.0 * tau**5


def _smoothstep(x: np.ndarray) -> np.ndarray:
    return 3.0 * x**2 - 2.0 * x**3


def phase_profile(verb: int, horizon: int) -> np.ndarray:
    """Hand-closure phase in ``[0, 1]``; it ramps up over the second half of the chunk."""
    tau = np.linspace(0.0, 1.0, horizon)
    ramp = _smoothstep(np.clip((tau - 0.5) / 0.5, 0.0, 1.0))
    return PHASE_SCALE[verb] * ramp


def wrist_orientations(verb: int, horizon: int) -> np.ndarray:
    tau = np.linspace(0.0, 1.0, horizon)
    return canonicalize_quat(slerp(WRIST_START, WRIST_END[verb], min_jerk(tau)))


def in_held_out_region(point: np.ndarray, region: float) -> bool:
    """Whether a point lies in the ``region``-sided square at the ``+x, +y`` workspace corner."""
    return region > 0 and bool(np.all(np.asarray(point)[:2] >= WORKSPACE_XY - region))


def gen_scene(
    rng: np.random.Generator,
    shape: int,
    color: int,
    region: float = 0.0,
    in_region: bool = False,
) -> Scene:
    """Three objects with distinct (shape, color) pairs, one of them the target.

    With ``in_region`` the target lies inside the held-out corner square of side ``region``;
    otherwise it is kept out of that square. Distractors may sit anywhere.
    """
    if in_region and region <= 0:
        raise WorldError("a target inside the held-out region needs a positive region size")
    others = [(s, c) for s in range(N_SHAPES) for c in range(N_COLORS) if (s, c) != (shape, color)]
    picks = rng.choice(len(others), size=N_OBJECTS - 1, replace=False)
    pairs = [(shape, color)] + [others[int(i)] for i in picks]
    order = rng.permutation(N_OBJECTS)
    pairs = [pairs[int(i)] for i in order]
    target = pairs.index((shape, color))

    positions = np.zeros((N_OBJECTS, 3))
    for _ in range(1000):
        positions[:, :2] = rng.uniform(-WORKSPACE_XY, WORKSPACE_XY, size=(N_OBJECTS, 2))
        positions[:, 2] = rng.uniform(0.0, TABLE_Z, size=N_OBJECTS)
        if in_region:
            positions[target, :2] = rng.uniform(WORKSPACE_XY - region, WORKSPACE_XY, size=2)
        elif in_held_out_region(positions[target], region):
            continue
        gaps = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
        if np.all(gaps[np.triu_indices(N_OBJECTS, k=1)] >= MIN_SEPARATION):
            break
    else:
        raise WorldError("could not place objects with the required separation")

    return Scene(
        positions=positions,
        shapes=np.array([p[0] for p in pairs], dtype=np.int64),
        colors=np.array([p[1] for p in pairs], dtype=np.int64),
    )


def gen_trajectory(
    scene: Scene, instruction: Instruction, rng: np.random.Generator, horizon: int = 15
) -> np.ndarray:
    """Minimum-jerk wrist path from ``HOME`` to the target plus a verb offset (``H x 3``).

    The additive noise is ``NOISE_AMPLITUDE * c * sin(pi * tau)**2`` with ``c`` uniform in
    ``[-1, 1]`` per axis, so it vanishes at both ends.
    """
    target = scene.positions[scene.resolve(instruction)] + TERMINAL_OFFSET[instruction.verb]
    tau = np.linspace(0.0, 1.0, horizon)
    path = HOME + min_jerk(tau)[:, None] * (target - HOME)
    c = rng.uniform(-1.0, 1.0, size=3)
    return path + NOISE_AMPLITUDE * c[None, :] * (np.sin(math.pi * tau) ** 2)[:, None]


def gen_hand(trajectory: np.ndarray, verb: int) -> np.ndarray:
    """``H x 67`` hand states: wrist translation, wrist quaternion, 15 joint quaternions."""
    horizon = trajectory.shape[0]
    phase = phase_profile(verb, horizon)
    joints = canonicalize_quat(slerp(OPEN_POSE[None], CLOSED_POSE[None], phase[:, None]))
    hand = np.empty((horizon, 7 + 4 * N_JOINTS))
    hand[:, :3] = trajectory
    hand[:, 3:7] = wrist_orientations(verb, horizon)
    hand[:, 7:] = joints.reshape(horizon, 4 * N_JOINTS)
    return hand


def gen_actions(trajectory: np.ndarray, verb: int) -> np.ndarray:
    """``H x 7`` robot chunk: position deltas, squashed orientation deltas, gripper."""
    horizon = trajectory.shape[0]
    positions = np.concatenate([HOME[None], trajectory], axis=0)
    position_delta = np.diff(positions, axis=0)

    wrist = wrist_orientations(verb, horizon)
    previous = np.concatenate([WRIST_START[None], wrist[:-1]], axis=0)
    relative = quat_multiply(wrist, quat_conjugate(previous))
    orientation_delta = np.tanh(ORIENTATION_GAIN * quat_to_rotvec(relative))

    gripper = np.tanh(GRIPPER_GAIN * phase_profile(verb, horizon))[:, None]
    return np.concatenate([position_delta, orientation_delta, gripper], axis=1)


def choose_held_out(seed: int, count: int) -> frozenset[tuple[int, int, int]]:
    """Combinations never shown with actions during training."""
    combos = all_combinations()
    if not 0 <= count < len(combos):
        raise WorldError(f"held-out combination count must lie in [0, {len(combos)}), got {count}")
    rng = np.random.default_rng(derive_seed(seed, "data", "held-out"))
    order = rng.permutation(len(combos))
    return frozenset(combos[int(i)] for i in order[:count])


def _split_combinations(split: str, held_out: frozenset[tuple[int, int, int]]) -> list:
    combos = all_combinations()
    if split == SPLIT_TRAIN:
        return combos
    if split == SPLIT_HELD_OUT_INSTRUCTION:
        return sorted(held_out)
    return [c for c in combos if c not in held_out]


def _shorten(hand: np.ndarray, valid_length: int) -> tuple[np.ndarray, np.ndarray]:
    padded = hand.copy()
    padded[valid_length:] = hand[valid_length - 1]
    valid = np.zeros(hand.shape[0], dtype=bool)
    valid[:valid_length] = True
    return padded, valid


def gen_dataset(
    count: int,
    split_spec: SplitSpec,
    seed: int,
    split: str = SPLIT_TRAIN,
    first_episode_id: int = 0,
    first_latent_id: int = 0,
) -> list[Episode]:
    """Generate ``count`` latents for ``split``.

    Train latents give a human episode and, unless the combination is held out, a
    robot episode over the same trajectory. Evaluation latents give one episode with
    both hand and actions. Held-out-layout targets sit in the corner square of side
    ``held_out_region`` that other targets never occupy; a zero side disables this.
    Latent ``i`` draws from its own seed, so a longer run extends a shorter one without
    changing it.
    """
    if split not in SPLITS:
        raise WorldError(f"unknown split {split!r}")
    combos = _split_combinations(split, split_spec.held_out)
    if not combos:
        raise WorldError(f"split {split!r} has no instruction combinations")
    region = split_spec.held_out_region
    if not 0.0 <= region <= WORKSPACE_XY:
        raise WorldError(f"held-out region must lie in [0, {WORKSPACE_XY}], got {region}")
    horizon = split_spec.horizon

    episodes: list[Episode] = []
    next_id = first_episode_id
    for i in range(count):
        latent_id = first_latent_id + i
        rng = np.random.default_rng(derive_seed(seed, f"data:{split}", i))
        verb, shape, color = combos[int(rng.integers(len(combos)))]
        instruction = Instruction(verb=verb, shape=shape, color=color)
        in_region = split == SPLIT_HELD_OUT_LAYOUT and region > 0
        scene = gen_scene(rng, shape, color, region, in_region=in_region)
        waypoints = gen_trajectory(scene, instruction, rng, horizon)
        hand = gen_hand(waypoints, verb)
        actions = gen_actions(waypoints, verb)
        shorten = rng.uniform() < split_spec.short_clip_fraction
        valid_length = int(rng.integers(max(1, horizon // 2), horizon)) if horizon > 1 else 1

        if split != SPLIT_TRAIN:
            episodes.append(
                Episode(
                    episode_id=next_id,
                    latent_id=latent_id,
                    split=split,
                    scene=scene,
                    instruction=instruction,
                    waypoints=waypoints,
                    hand=hand,
                    hand_valid=np.ones(horizon, dtype=bool),
                    actions=actions,
                )
            )
            next_id += 1
            continue

        hand_valid = np.ones(horizon, dtype=bool)
        if shorten and horizon > 1:
            hand, hand_valid = _shorten(hand, valid_length)
        episodes.append(
            Episode(
                episode_id=next_id,
                latent_id=latent_id,
                split=split,
                scene=scene,
                instruction=instruction,
                waypoints=waypoints,
                hand=hand,
                hand_valid=hand_valid,
            )
        )
        next_id += 1
        if instruction.combination not in split_spec.held_out:
            episodes.append(
                Episode(
                    episode_id=next_id,
                    latent_id=latent_id,
                    split=split,
                    scene=scene,
                    instruction=instruction,
                    waypoints=waypoints.copy(),
                    actions=actions,
                )
            )
            next_id += 1
    return episodes


def generate_world(
    train_latents: int,
    eval_episodes: int,
    split_spec: SplitSpec,
    seed: int,
) -> list[Episode]:
    """Train split followed by both evaluation splits, with globally unique ids."""
    episodes = gen_dataset(train_latents, split_spec, seed, SPLIT_TRAIN)
    for split in (SPLIT_HELD_OUT_INSTRUCTION, SPLIT_HELD_OUT_LAYOUT):
        episodes.extend(
            gen_dataset(
                eval_episodes,
                split_spec,
                seed,
                split,
                first_episode_id=len(episodes),
                first_latent_id=max((e.latent_id for e in episodes), default=-1) + 1,
            )
        )
    return episodes


def split_statistics(episodes: Iterable[Episode]) -> dict[str, dict[str, int]]:
    """Episode counts by split and kind."""
    counts: Counter[tuple[str, str]] = Counter((e.split, e.kind) for e in episodes)
    stats: dict[str, dict[str, int]] = {}
    for (split, kind), n in sorted(counts.items()):
        stats.setdefault(split, {})[kind] = n
    return stats


def robot_combinations(episodes: Iterable[Episode]) -> set[tuple[int, int, int]]:
    """Combinations that appear with actions in the train split."""
    return {
        e.instruction.combination for e in episodes if e.split == SPLIT_TRAIN and e.has_actions
    }
