"""Quaternion helpers. Quaternions are ``(w, x, y, z)`` along the last axis."""

from __future__ import annotations

import numpy as np

from ..constants import HAND_DIM, N_JOINTS, WRIST_DIM


class QuaternionError(ValueError):
    """Raised for zero-norm or malformed quaternions."""

    pass


def _check_last_axis(q: np.ndarray) -> np.ndarray:
    arr = np.asarray(q, dtype=np.float64)
    if arr.shape[-1:] != (4,):
        raise QuaternionError(f"quaternions need a last axis of 4, got shape {arr.shape}")
    return arr


def normalize_quat(q: np.ndarray) -> np.ndarray:
    arr = _check_last_axis(q)
    norm = np.linalg.norm(arr, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise QuaternionError("cannot normalize a zero-norm or non-finite quaternion")
    return arr / norm


def canonicalize_quat(q: np.ndarray) -> np.ndarray:
    """Unit norm with a non-negative scalar part.

    When the scalar part is exactly zero the first nonzero component is made positive,
    so ``q`` and ``-q`` always map to the same representative.
    """
    unit = normalize_quat(q)
    nonzero = unit != 0.0
    lead_index = np.argmax(nonzero, axis=-1)[..., None]
    lead = np.take_along_axis(unit, lead_index, axis=-1)
    return np.where(lead < 0.0, -unit, unit)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    arr = _check_last_axis(q)
    return arr * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = _check_last_axis(a)
    b = _check_last_axis(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle) of each quaternion, shortest-arc branch."""
    unit = canonicalize_quat(q)
    w = np.clip(unit[..., :1], -1.0, 1.0)
    vec = unit[..., 1:]
    sin_half = np.linalg.norm(vec, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(sin_half, w)
    # angle / sin(angle/2) -> 2 as the rotation vanishes
    factor = np.where(sin_half > 1e-12, angle / np.maximum(sin_half, 1e-12), 2.0)
    return vec * factor


def slerp(q0: np.ndarray, q1: np.ndarray, u: np.ndarray | float) -> np.ndarray:
    """Shortest-arc spherical interpolation; ``u`` broadcasts against the leading axes."""
    a = normalize_quat(q0)
    b = normalize_quat(q1)
    u = np.asarray(u, dtype=np.float64)[..., None]
    dot = np.sum(a * b, axis=-1, keepdims=True)
    b = np.where(dot < 0.0, -b, b)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.sin(theta)
    near = sin_theta < 1e-9
    safe = np.where(near, 1.0, sin_theta)
    w0 = np.where(near, 1.0 - u, np.sin((1.0 - u) * theta) / safe)
    w1 = np.where(near, u, np.sin(u * theta) / safe)
    return normalize_quat(w0 * a + w1 * b)


def hand_quaternion_blocks(hand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``(..., 67)`` hand states into wrist ``(..., 4)`` and joint ``(..., 15, 4)`` views."""
    arr = np.asarray(hand, dtype=np.float64)
    if arr.shape[-1] != HAND_DIM:
        raise QuaternionError(f"hand states need a last axis of {HAND_DIM}, got {arr.shape}")
    wrist = arr[..., 3:WRIST_DIM]
    joints = arr[..., WRIST_DIM:].reshape(*arr.shape[:-1], N_JOINTS, 4)
    return wrist, joints


def renormalize_hand(hand: np.ndarray) -> np.ndarray:
    """Return a copy with every quaternion block canonicalized to unit norm."""
    arr = np.array(hand, dtype=np.float64, copy=True)
    wrist, joints = hand_quaternion_blocks(arr)
    arr[..., 3:WRIST_DIM] = canonicalize_quat(wrist)
    arr[..., WRIST_DIM:] = canonicalize_quat(joints).reshape(*arr.shape[:-1], 4 * N_JOINTS)
    return arr
