"""Closed-form diffusion arithmetic: variance schedule, forward noising, reverse mean.

Noise levels run from 0 (clean) to T. Every table is stored with a leading
entry for level 0 so that ``sched.alpha_bar[t]`` reads exactly like the math.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cape.errors import ConfigError, StructuralError, UsageError

DEFAULT_T = 25
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.8


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed beta/alpha/alpha_bar/sigma tables for ``T`` noise levels.

    Arrays have length ``T + 1``; index 0 holds the clean-level values
    (beta 0, alpha 1, alpha_bar 1, sigma 0).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            arr = getattr(self, name)
            if arr.shape != (self.T + 1,):
                raise StructuralError(f"{name} must have length T+1={self.T + 1}, got {arr.shape}")
            arr.setflags(write=False)

    def check_level(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise UsageError(f"noise level {t} outside [1, {self.T}]")
        return int(t)


def make_schedule(
    T: int = DEFAULT_T,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> DiffusionSchedule:
    """Exponential (geometrically spaced) beta schedule.

    sigma uses the DDPM posterior variance, so sigma_1 is exactly 0.
    """
    if int(T) != T or T < 2:
        raise ConfigError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min < beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}")
    T = int(T)
    beta = np.empty(T + 1)
    beta[0] = 0.0
    beta[1:] = np.geomspace(beta_min, beta_max, T)
    # geomspace can wobble in the last ulp; keep the ordering exact
    beta[1:] = np.maximum.accumulate(beta[1:])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.zeros(T + 1)
    var = beta[2:] * (1.0 - alpha_bar[1:-1]) / (1.0 - alpha_bar[2:])
    sigma[2:] = np.sqrt(var)
    return DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


@dataclass
class Trajectory:
    """N x d waypoints tagged with the noise level they nominally sit at."""

    waypoints: np.ndarray
    noise_level: int = 0

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2:
            raise StructuralError(f"waypoints must be N x d, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise StructuralError("waypoints contain non-finite values")
        self.waypoints = w
        self.noise_level = int(self.noise_level)

    @property
    def N(self) -> int:
        return self.waypoints.shape[0]

    @property
    def d(self) -> int:
        return self.waypoints.shape[1]

    def copy(self) -> Trajectory:
        return Trajectory(self.waypoints.copy(), self.noise_level)


def forward_noise(traj: Trajectory, t: int, noise: np.ndarray, sched: DiffusionSchedule) -> Trajectory:
    """Sample q(tau_t | tau_0) with the supplied standard-normal ``noise``."""
    t = sched.check_level(t)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != traj.waypoints.shape:
        raise StructuralError(f"noise shape {noise.shape} != trajectory shape {traj.waypoints.shape}")
    ab = sched.alpha_bar[t]
    return Trajectory(np.sqrt(ab) * traj.waypoints + np.sqrt(1.0 - ab) * noise, noise_level=t)


def reverse_mean(traj_t: Trajectory | np.ndarray, t: int, eps_pred: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Posterior mean of the reverse step from level t given predicted noise."""
    t = sched.check_level(t)
    x = traj_t.waypoints if isinstance(traj_t, Trajectory) else np.asarray(traj_t, dtype=float)
    eps_pred = np.asarray(eps_pred, dtype=float)
    if eps_pred.shape != x.shape:
        raise StructuralError(f"eps_pred shape {eps_pred.shape} != trajectory shape {x.shape}")
    a, ab = sched.alpha[t], sched.alpha_bar[t]
    return (x - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_pred) / np.sqrt(a)
