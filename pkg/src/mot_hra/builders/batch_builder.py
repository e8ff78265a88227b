from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from ..constants import HAND_DIM
from ..synth.world import Episode
from ..utils.quantize import quantize_points


class BatchError(ValueError):
    """Raised when episodes cannot be collated into a batch."""

    pass


@dataclass(frozen=True)
class ActionNormalization:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return (actions - self.mean) / self.std

    def denormalize(self, actions: np.ndarray) -> np.ndarray:
        return actions * self.std + self.mean

    @classmethod
    def identity(cls, action_dim: int) -> ActionNormalization:
        return cls(mean=np.zeros(action_dim), std=np.ones(action_dim))

    @classmethod
    def fit(cls, chunks: Sequence[np.ndarray], floor: float = 1e-6) -> ActionNormalization:
        """Per-dimension mean and std over every timestep of every chunk."""
        if not chunks:
            raise BatchError("cannot fit action normalization without robot episodes")
        stacked = np.concatenate([np.asarray(c, dtype=np.float64) for c in chunks], axis=0)
        return cls(mean=stacked.mean(axis=0), std=np.maximum(stacked.std(axis=0), floor))


@dataclass(frozen=True, eq=False)
class EpisodeBatch:
    """Numpy view of a batch of episodes; absent modalities are zero-filled and flagged."""

    episode_ids: np.ndarray
    scene: np.ndarray
    text: np.ndarray
    text_dropped: np.ndarray
    plan: np.ndarray
    plan_bins: np.ndarray
    hand: np.ndarray
    hand_valid: np.ndarray
    has_mano: np.ndarray
    actions: np.ndarray
    has_action: np.ndarray

    @property
    def size(self) -> int:
        return int(self.episode_ids.shape[0])

    def with_text_dropped(self, dropped: np.ndarray) -> EpisodeBatch:
        return replace(self, text_dropped=np.asarray(dropped, dtype=bool).copy())

    def select(self, rows: np.ndarray) -> EpisodeBatch:
        idx = np.asarray(rows)
        return EpisodeBatch(
            **{name: getattr(self, name)[idx] for name in self.__dataclass_fields__}
        )


def collate(
    episodes: Sequence[Episode],
    *,
    n_img: int,
    n_txt: int,
    horizon: int,
    bins: int,
    coord_range: tuple[float, float],
    action_dim: int,
    normalization: ActionNormalization | None = None,
    require_supervision: bool = True,
) -> EpisodeBatch:
    """Stack episodes into arrays. Actions are z-normalized with ``normalization``."""
    if not episodes:
        raise BatchError("empty batch")
    size = len(episodes)
    norm = normalization or ActionNormalization.identity(action_dim)

    scene = np.zeros((size, n_img, 5), dtype=np.int64)
    text = np.zeros((size, n_txt), dtype=np.int64)
    plan = np.zeros((size, horizon, 3))
    hand = np.zeros((size, horizon, HAND_DIM))
    hand_valid = np.zeros((size, horizon), dtype=bool)
    has_mano = np.zeros(size, dtype=bool)
    actions = np.zeros((size, horizon, action_dim))
    has_action = np.zeros(size, dtype=bool)

    for i, ep in enumerate(episodes):
        if ep.waypoints.shape != (horizon, 3):
            raise BatchError(
                f"episode {ep.episode_id}: waypoints {ep.waypoints.shape} do not match H={horizon}"
            )
        if require_supervision and not (ep.has_hand or ep.has_actions):
            raise BatchError(f"episode {ep.episode_id} carries neither hand states nor actions")
        scene[i] = ep.scene.tokens(n_img, coord_range, bins)
        text[i] = ep.instruction.tokens(n_txt)
        plan[i] = ep.waypoints
        if ep.hand is not None:
            hand[i] = ep.hand
            hand_valid[i] = ep.hand_valid if ep.hand_valid is not None else True
            has_mano[i] = True
        if ep.actions is not None:
            if ep.actions.shape != (horizon, action_dim):
                raise BatchError(
                    f"episode {ep.episode_id}: actions {ep.actions.shape} do not match "
                    f"({horizon}, {action_dim})"
                )
            actions[i] = norm.normalize(ep.actions)
            has_action[i] = True

    return EpisodeBatch(
        episode_ids=np.array([ep.episode_id for ep in episodes], dtype=np.int64),
        scene=scene,
        text=text,
        text_dropped=np.zeros(size, dtype=bool),
        plan=plan,
        plan_bins=quantize_points(plan, coord_range, bins),
        hand=hand,
        hand_valid=hand_valid,
        has_mano=has_mano,
        actions=actions,
        has_action=has_action,
    )
