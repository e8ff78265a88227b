"""Uniform per-axis binning of waypoint coordinates."""

from __future__ import annotations

import numpy as np


class QuantizationError(ValueError):
    """Raised for non-finite values or an invalid bin range."""

    pass


def _check_range(lo: float, hi: float, bins: int) -> None:
    if bins < 2:
        raise QuantizationError(f"bin count must be at least 2, got {bins}")
    if not lo < hi:
        raise QuantizationError(f"empty coordinate range [{lo}, {hi}]")


def quantize(value: np.ndarray | float, lo: float, hi: float, bins: int) -> np.ndarray:
    """``clamp(floor((value - lo) / (hi - lo) * bins), 0, bins - 1)`` elementwise."""
    _check_range(lo, hi, bins)
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("cannot quantize non-finite values")
    raw = np.floor((arr - lo) / (hi - lo) * bins)
    return np.clip(raw, 0, bins - 1).astype(np.int64)


def dequantize(bin_index: np.ndarray | int, lo: float, hi: float, bins: int) -> np.ndarray:
    """Bin centre: ``lo + (bin + 0.5) * (hi - lo) / bins``."""
    _check_range(lo, hi, bins)
    idx = np.asarray(bin_index)
    if idx.size and (idx.min() < 0 or idx.max() >= bins):
        raise QuantizationError(f"bin index out of range [0, {bins})")
    return lo + (idx.astype(np.float64) + 0.5) * (hi - lo) / bins


def quantize_points(points: np.ndarray, coord_range: tuple[float, float], bins: int) -> np.ndarray:
    """Quantize an ``(..., 3)`` array of positions with one shared range per axis."""
    lo, hi = coord_range
    return quantize(points, lo, hi, bins)


def dequantize_points(
    bins_xyz: np.ndarray, coord_range: tuple[float, float], bins: int
) -> np.ndarray:
    lo, hi = coord_range
    return dequantize(bins_xyz, lo, hi, bins)
