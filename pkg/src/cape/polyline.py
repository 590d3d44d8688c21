"""Polyline re-parameterization shared by data generation, the denoiser, and the planner."""

from __future__ import annotations

import numpy as np

from cape.errors import UsageError
from cape.schedule import Trajectory


def resample_arclength(polyline, N: int) -> np.ndarray:
    """N points spaced uniformly in arc length along ``polyline``; endpoints exact."""
    poly = np.asarray(polyline, dtype=float)
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0.0:
        return np.repeat(poly[:1], N, axis=0)
    targets = np.linspace(0.0, total, N)
    out = np.empty((N, poly.shape[1]))
    for j in range(poly.shape[1]):
        out[:, j] = np.interp(targets, s, poly[:, j])
    out[0] = poly[0]
    out[-1] = poly[-1]
    return out


def polyline_length(polyline) -> float:
    poly = np.asarray(polyline, dtype=float)
    return float(np.sum(np.linalg.norm(np.diff(poly, axis=0), axis=1)))


def moving_intervals(length, N: int, resolution: float | None):
    """Number of waypoint intervals that carry motion under ``normalize_length``.

    Works elementwise on arrays of lengths. Without a resolution every one of
    the N-1 intervals moves.
    """
    length = np.asarray(length, dtype=float)
    if resolution is None:
        return np.full(length.shape, N - 1)
    return np.clip(np.ceil(length / resolution), 1, N - 1).astype(int)


def normalize_length(polyline, N: int, resolution: float | None = None) -> Trajectory:
    """Bring a polyline to exactly N waypoints.

    The sequence length is the vertex count, or, when ``resolution`` is given,
    the number of samples needed to traverse the path at that spacing. Longer
    sequences are resampled uniformly in arc length; shorter ones are padded by
    repeating the final point.
    """
    poly = np.asarray(polyline, dtype=float)
    if poly.ndim != 2 or len(poly) < 2:
        raise UsageError("polyline needs at least two points")
    if resolution is not None:
        k = int(moving_intervals(polyline_length(poly), N, resolution))
        seq = resample_arclength(poly, k + 1)
    else:
        seq = poly
    if len(seq) == N:
        return Trajectory(seq.copy())
    if len(seq) > N:
        return Trajectory(resample_arclength(seq, N))
    pad = np.repeat(seq[-1:], N - len(seq), axis=0)
    return Trajectory(np.concatenate([seq, pad]))


def straight_paths(starts, goals, N: int, resolution: float | None = None) -> np.ndarray:
    """Batch of straight start-goal segments normalized exactly like demonstrations, (B, N, d)."""
    starts = np.asarray(starts, dtype=float)
    goals = np.asarray(goals, dtype=float)
    k = moving_intervals(np.linalg.norm(goals - starts, axis=-1), N, resolution)
    frac = np.minimum(np.arange(N)[None, :] / k[:, None], 1.0)[:, :, None]
    out = starts[:, None, :] + frac * (goals - starts)[:, None, :]
    out[:, -1] = goals
    return out
