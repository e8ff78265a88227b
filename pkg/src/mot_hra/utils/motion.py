"""Hand-motion metrics: displacement, time-warped distance and rotation errors.

Positions are in workspace units (meters in the reported tables) and rotation errors in
degrees. DTW is normalized by the length of the optimal alignment path; among equally
cheap alignments the shortest one is used.
"""

from __future__ import annotations

import numpy as np

from .quaternion import QuaternionError, hand_quaternion_blocks, normalize_quat


class MetricInputError(ValueError):
    """Raised when metric inputs are empty, mismatched or degenerate."""

    pass


def _points(x: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise MetricInputError(f"{name} must be a T x D sequence, got shape {arr.shape}")
    return arr


def ade(pred: np.ndarray, gt: np.ndarray, truncate: bool = False) -> float:
    """Mean Euclidean distance between aligned timesteps.

    With ``truncate`` the longer sequence is cut to the shorter length; otherwise a
    length mismatch is an error.
    """
    p = _points(pred, "pred")
    g = _points(gt, "gt")
    if p.shape[1] != g.shape[1]:
        raise MetricInputError(f"ade: point widths differ: {p.shape} vs {g.shape}")
    if p.shape[0] != g.shape[0]:
        if not truncate:
            raise MetricInputError(f"ade: lengths differ: {p.shape[0]} vs {g.shape[0]}")
        n = min(p.shape[0], g.shape[0])
        p, g = p[:n], g[:n]
    if p.shape[0] == 0:
        raise MetricInputError("ade: empty sequences")
    return float(np.linalg.norm(p - g, axis=1).mean())


def dtw_alignment(pred: np.ndarray, gt: np.ndarray) -> tuple[float, int]:
    """Optimal cumulative cost and path length over steps (1,0), (0,1), (1,1)."""
    p = _points(pred, "pred")
    g = _points(gt, "gt")
    if p.shape[0] == 0 or g.shape[0] == 0:
        raise MetricInputError("dtw: both sequences must be non-empty")
    if p.shape[1] != g.shape[1]:
        raise MetricInputError(f"dtw: point widths differ: {p.shape} vs {g.shape}")

    local = np.linalg.norm(p[:, None, :] - g[None, :, :], axis=-1)
    n, m = local.shape
    cost = np.full((n + 1, m + 1), np.inf)
    length = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[0, 0] = 0.0

    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best_cost = np.inf
            best_len = 0
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                c = cost[pi, pj]
                ln = length[pi, pj]
                if c < best_cost or (c == best_cost and ln < best_len):
                    best_cost, best_len = c, ln
            cost[i, j] = best_cost + local[i - 1, j - 1]
            length[i, j] = best_len + 1

    return float(cost[n, m]), int(length[n, m])


def dtw(pred: np.ndarray, gt: np.ndarray) -> float:
    total, steps = dtw_alignment(pred, gt)
    return total / steps


def rot_error(pred_q: np.ndarray, gt_q: np.ndarray) -> np.ndarray:
    """Geodesic angle in degrees between quaternions, elementwise over leading axes."""
    try:
        p = normalize_quat(pred_q)
        g = normalize_quat(gt_q)
    except QuaternionError as exc:
        raise MetricInputError(str(exc)) from exc
    if p.shape != g.shape:
        raise MetricInputError(f"rot_error: shapes differ: {p.shape} vs {g.shape}")
    dot = np.clip(np.abs(np.sum(p * g, axis=-1)), 0.0, 1.0)
    return np.degrees(2.0 * np.arccos(dot))


def _truncate_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = min(pred.shape[0], gt.shape[0])
    if n == 0:
        raise MetricInputError("empty hand sequences")
    return pred[:n], gt[:n]


def wrist_rot_error(pred_hand: np.ndarray, gt_hand: np.ndarray) -> float:
    """Wrist ``Rot``: mean over timesteps of the wrist quaternion error."""
    p, g = _truncate_pair(np.asarray(pred_hand), np.asarray(gt_hand))
    pw, _ = hand_quaternion_blocks(p)
    gw, _ = hand_quaternion_blocks(g)
    return float(rot_error(pw, gw).mean())


def joint_rot_error(pred_hand: np.ndarray, gt_hand: np.ndarray) -> float:
    """``Joint-Rot``: mean over the 15 joints, then over timesteps."""
    p, g = _truncate_pair(np.asarray(pred_hand), np.asarray(gt_hand))
    _, pj = hand_quaternion_blocks(p)
    _, gj = hand_quaternion_blocks(g)
    return float(rot_error(pj, gj).mean(axis=-1).mean())
