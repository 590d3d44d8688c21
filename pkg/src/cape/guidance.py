"""Collision-aware guidance from obstacle point clouds."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cape.errors import ConfigError, LoadError, UsageError
from cape.schedule import Trajectory


@dataclass(frozen=True)
class ObstaclePointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise UsageError(f"point cloud must be M x d, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise UsageError("point cloud contains non-finite values")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def empty(cls, d: int) -> ObstaclePointCloud:
        return cls(np.zeros((0, d)))

    @property
    def M(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.M


@dataclass(frozen=True)
class GuidanceConfig:
    strength: float = 0.2
    start_step: int = 5
    eef_radius: float = 0.08
    safety_margin: float = 0.06
    # world distance a waypoint moves per unit strength in one guided step
    step_length: float = 0.03

    def __post_init__(self):
        if self.strength < 0:
            raise ConfigError("guidance strength must be >= 0")
        if int(self.start_step) != self.start_step or self.start_step < 1:
            raise ConfigError("guidance start step must be an integer >= 1")
        if self.eef_radius <= 0 or self.safety_margin <= 0:
            raise ConfigError("eef_radius and safety_margin must be positive")
        if self.step_length <= 0:
            raise ConfigError("guidance step length must be positive")

    @property
    def threshold(self) -> float:
        return self.safety_margin + self.eef_radius

    def validate_for(self, T: int):
        if self.start_step > T:
            raise ConfigError(f"guidance start step {self.start_step} exceeds T={T}")


def nearest_points(P: np.ndarray, cloud: ObstaclePointCloud) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force nearest cloud point for each row of ``P``; ties go to the lowest index."""
    if cloud.M == 0:
        raise UsageError("no obstacles: nearest distance is undefined for an empty cloud")
    diff = P[:, None, :] - cloud.points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    idx = np.argmin(d2, axis=1)
    return np.sqrt(d2[np.arange(len(P)), idx]), idx


def nearest_distance(p, cloud: ObstaclePointCloud) -> tuple[float, int]:
    p = np.asarray(p, dtype=float)
    dist, idx = nearest_points(p[None, :], cloud)
    return float(dist[0]), int(idx[0])


def cost_from_distance(dist, cfg: GuidanceConfig):
    """Hinge penalty: threshold minus distance inside the margin, zero outside."""
    thr = cfg.threshold
    dist = np.asarray(dist, dtype=float)
    return np.where(dist <= thr, thr - dist, 0.0)


def collision_cost(p, cloud: ObstaclePointCloud, cfg: GuidanceConfig) -> float:
    if cloud.M == 0:
        return 0.0
    dist, _ = nearest_distance(p, cloud)
    return float(cost_from_distance(dist, cfg))


def trajectory_cost(waypoints, cloud: ObstaclePointCloud, cfg: GuidanceConfig) -> float:
    """Sum of per-waypoint costs."""
    W = waypoints.waypoints if isinstance(waypoints, Trajectory) else np.asarray(waypoints, dtype=float)
    if cloud.M == 0:
        return 0.0
    dist, _ = nearest_points(W, cloud)
    return float(np.sum(cost_from_distance(dist, cfg)))


def cost_gradient(traj, cloud: ObstaclePointCloud, cfg: GuidanceConfig) -> np.ndarray:
    """Gradient of the summed cost w.r.t. each waypoint (N x d, world units).

    Inside the margin the gradient is minus the unit vector from the nearest
    obstacle point. It is zero outside the margin, at coincident points, and
    at the two boundary waypoints (those are clamped anyway).
    """
    W = traj.waypoints if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    grad = np.zeros_like(W)
    if cloud.M == 0 or len(W) <= 2:
        return grad
    inner = W[1:-1]
    dist, idx = nearest_points(inner, cloud)
    active = (dist <= cfg.threshold) & (dist > 0.0)
    if np.any(active):
        away = inner[active] - cloud.points[idx[active]]
        grad[1:-1][active] = -away / dist[active][:, None]
    return grad


def guided_correction(mu, cloud: ObstaclePointCloud, cfg: GuidanceConfig, normalizer=None) -> np.ndarray:
    """One descent step on the collision cost: ``mu - strength * step_length * grad``.

    With a ``normalizer``, ``mu`` is in normalized coordinates: the cost is
    evaluated at the world positions and the world-space step is mapped back,
    so the displacement in meters is the same either way.
    """
    mu = np.asarray(mu, dtype=float)
    if cfg.strength == 0 or cloud.M == 0:
        return mu
    scale = cfg.strength * cfg.step_length
    if normalizer is None:
        return mu - scale * cost_gradient(mu, cloud, cfg)
    grad = cost_gradient(normalizer.to_world(mu), cloud, cfg)
    return mu - scale * grad / normalizer.half_extent


def write_point_cloud(cloud: ObstaclePointCloud, path) -> Path:
    path = Path(path)
    lines = [f"#pcd d={cloud.d} m={cloud.M}"]
    lines += [" ".join(format(v, ".17g") for v in row) for row in cloud.points]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_point_cloud(path) -> ObstaclePointCloud:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#pcd"):
        raise LoadError("missing '#pcd d=<d> m=<M>' header", field="header")
    fields = dict(tok.split("=", 1) for tok in text[0].split()[1:] if "=" in tok)
    try:
        d, m = int(fields["d"]), int(fields["m"])
    except (KeyError, ValueError):
        raise LoadError(f"malformed point cloud header: {text[0]!r}", field="header") from None
    rows = [ln.split() for ln in text[1:] if ln.strip()]
    if len(rows) != m:
        raise LoadError(f"header says m={m} but file has {len(rows)} points", field="m")
    if any(len(r) != d for r in rows):
        raise LoadError(f"every point must have d={d} coordinates", field="d")
    pts = np.array(rows, dtype=float).reshape(m, d)
    return ObstaclePointCloud(pts)
