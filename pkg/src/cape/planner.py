"""Guided denoising, prior-seeded iterative refinement, and the baseline controllers.

Noisy trajectories (level t >= 1) live in the model's normalized coordinates;
clean plans (level 0) are returned in world coordinates with their endpoints
written exactly to the task start and goal.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field

import numpy as np

from cape.denoiser import DenoiserParams, TaskContext, predict_noise
from cape.errors import ConfigError, UsageError
from cape.guidance import GuidanceConfig, ObstaclePointCloud, guided_correction
from cape.polyline import normalize_length, polyline_length, resample_arclength
from cape.schedule import DiffusionSchedule, Trajectory, forward_noise, reverse_mean


class ControllerKind(str, enum.Enum):
    CAPE = "cape"
    MPD = "mpd"
    MPD_REFINE = "mpd_refine"

    @classmethod
    def parse(cls, name) -> ControllerKind:
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("+", "_").replace("-", "_")
        for kind in cls:
            if kind.value == key or kind.name.lower() == key:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise UsageError(f"unknown controller {name!r}; valid names: {valid}")


@dataclass(frozen=True)
class PlannerConfig:
    prefix_length: int = 2
    prior_noise_level: int = 2
    max_iterations: int | None = None
    goal_tolerance: float = 0.02
    controller_kind: ControllerKind = ControllerKind.CAPE

    def __post_init__(self):
        object.__setattr__(self, "controller_kind", ControllerKind.parse(self.controller_kind))
        if self.prefix_length < 1:
            raise ConfigError("prefix length m must be >= 1")
        if self.prior_noise_level < 1:
            raise ConfigError("prior noise level delta must be >= 1")
        if self.goal_tolerance <= 0:
            raise ConfigError("goal tolerance must be > 0")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")

    def validate_for(self, N: int, T: int):
        if not 1 <= self.prefix_length < N:
            raise ConfigError(f"prefix length m={self.prefix_length} must satisfy 1 <= m < N={N}")
        if not 1 <= self.prior_noise_level <= T:
            raise ConfigError(f"prior noise level delta={self.prior_noise_level} must lie in [1, T={T}]")

    def iteration_budget(self, N: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return int(10 * N // self.prefix_length)


class NoiseModel:
    """Trained parameters plus an evaluation counter."""

    def __init__(self, params: DenoiserParams):
        self.params = params
        self.calls = 0

    @property
    def normalizer(self):
        return self.params.normalizer

    @property
    def N(self) -> int:
        return self.params.N

    @property
    def d(self) -> int:
        return self.params.d

    def __call__(self, x, t: int, ctx: TaskContext) -> np.ndarray:
        self.calls += 1
        return predict_noise(self.params, x, t, ctx)


def _as_model(model) -> NoiseModel:
    return model if isinstance(model, NoiseModel) else NoiseModel(model)


def guided_denoise(traj_t: Trajectory, t_start: int, ctx: TaskContext, model, cloud: ObstaclePointCloud,
                   gcfg: GuidanceConfig, sched: DiffusionSchedule, rng: np.random.Generator) -> Trajectory:
    """Reverse chain from ``t_start`` to 0 with cost guidance for t <= start_step.

    Reverse-step noise is added on every step (sigma_1 = 0) and both
    boundary waypoints are clamped after every step.
    """
    model = _as_model(model)
    t_start = sched.check_level(t_start)
    if traj_t.noise_level != t_start:
        raise UsageError(f"trajectory is tagged at level {traj_t.noise_level}, denoising starts at {t_start}")
    nz = model.normalizer
    s_u, g_u = nz.to_unit(ctx.start), nz.to_unit(ctx.goal)
    x = traj_t.waypoints.copy()
    for t in range(t_start, 0, -1):
        eps = model(x, t, ctx)
        mu = reverse_mean(x, t, eps, sched)
        if t <= gcfg.start_step:
            mu = guided_correction(mu, cloud, gcfg, normalizer=nz)
        z = rng.standard_normal(x.shape)
        x = mu + sched.sigma[t] * z
        x[0] = s_u
        x[-1] = g_u
    out = nz.to_world(x)
    out[0] = ctx.start
    out[-1] = ctx.goal
    return Trajectory(out, noise_level=0)


def ddpm_sample(traj_t: Trajectory, t_start: int, ctx: TaskContext, model, sched: DiffusionSchedule,
                rng: np.random.Generator) -> Trajectory:
    """Plain clamped DDPM sampler without guidance (reference path for tests)."""
    model = _as_model(model)
    nz = model.normalizer
    x = traj_t.waypoints.copy()
    for t in range(t_start, 0, -1):
        mu = reverse_mean(x, t, model(x, t, ctx), sched)
        x = mu + sched.sigma[t] * rng.standard_normal(x.shape)
        x[0] = nz.to_unit(ctx.start)
        x[-1] = nz.to_unit(ctx.goal)
    out = nz.to_world(x)
    out[0] = ctx.start
    out[-1] = ctx.goal
    return Trajectory(out, noise_level=0)


def initial_plan(ctx: TaskContext, model, cloud, gcfg: GuidanceConfig, pcfg: PlannerConfig,
                 sched: DiffusionSchedule, rng: np.random.Generator) -> Trajectory:
    model = _as_model(model)
    x = rng.standard_normal((model.N, model.d))
    nz = model.normalizer
    x[0] = nz.to_unit(ctx.start)
    x[-1] = nz.to_unit(ctx.goal)
    return guided_denoise(Trajectory(x, sched.T), sched.T, ctx, model, cloud, gcfg, sched, rng)


def extract_remainder(plan: Trajectory, m: int, new_start, goal, resolution: float | None = None) -> np.ndarray:
    """Unexecuted part of ``plan`` re-anchored at ``new_start``/``goal``, brought back to N points.

    Resampling is uniform in arc length; with a ``resolution`` the same
    interpolate-or-pad rule as the training data applies.
    """
    W = plan.waypoints
    N = len(W)
    if not 1 <= m < N:
        raise UsageError(f"prefix length m={m} must satisfy 1 <= m < N={N}")
    new_start = np.asarray(new_start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    poly = np.concatenate([new_start[None], W[m:], goal[None]])
    if polyline_length(poly) < 1e-12:
        poly = np.stack([new_start, goal])
    if resolution is None:
        return resample_arclength(poly, N)
    return normalize_length(poly, N, resolution).waypoints


def build_prior(plan: Trajectory, m: int, new_start, goal, delta: int, sched: DiffusionSchedule,
                rng: np.random.Generator, normalizer, noise=None, resolution: float | None = None) -> Trajectory:
    """Prior at level ``delta`` (normalized coordinates) from the plan's unexecuted remainder."""
    clean = Trajectory(normalizer.to_unit(extract_remainder(plan, m, new_start, goal, resolution)))
    if noise is None:
        noise = rng.standard_normal(clean.waypoints.shape)
    return forward_noise(clean, delta, noise, sched)


@dataclass
class PlannerState:
    start: np.ndarray
    goal: np.ndarray
    current_plan: Trajectory | None = None
    iteration: int = 0
    executed_path: list = field(default_factory=list)
    done: bool = False
    plan_cursor: int = 0
    refine_count: int = 0
    refine_time: float = 0.0
    plan_time: float = 0.0
    snapshots: list = field(default_factory=list)

    @property
    def position(self) -> np.ndarray:
        return self.executed_path[-1]


@dataclass
class PlannerSetup:
    """Everything a controller needs besides the state and the current observation."""

    model: NoiseModel
    sched: DiffusionSchedule
    gcfg: GuidanceConfig
    pcfg: PlannerConfig
    rng: np.random.Generator
    record_plans: bool = False
    clock: object = time.perf_counter

    def __post_init__(self):
        self.model = _as_model(self.model)
        self.pcfg.validate_for(self.model.N, self.sched.T)
        self.gcfg.validate_for(self.sched.T)

    @property
    def max_iterations(self) -> int:
        return self.pcfg.iteration_budget(self.model.N)


def start_state(start, goal, setup: PlannerSetup) -> PlannerState:
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    state = PlannerState(start=start.copy(), goal=goal.copy(), executed_path=[start.copy()])
    state.done = bool(np.linalg.norm(start - goal) <= setup.pcfg.goal_tolerance)
    return state


def _snapshot(state: PlannerState, setup: PlannerSetup, level: int):
    if setup.record_plans:
        state.snapshots.append({"iteration": state.iteration, "noise_level": level,
                                "waypoints": state.current_plan.waypoints.tolist()})


def step_controller(state: PlannerState, cloud: ObstaclePointCloud, setup: PlannerSetup) -> list[np.ndarray]:
    """Run one plan/refine cycle and execute the next prefix.

    Returns the newly executed waypoints (also appended to ``state.executed_path``).
    """
    if state.done:
        raise UsageError("controller is already done")
    pcfg, sched, model = setup.pcfg, setup.sched, setup.model
    m, N = pcfg.prefix_length, model.N
    kind = pcfg.controller_kind
    ctx = TaskContext(state.position.copy(), state.goal.copy())
    t0 = setup.clock()

    if state.current_plan is None:
        state.current_plan = initial_plan(ctx, model, cloud, setup.gcfg, pcfg, sched, setup.rng)
        _snapshot(state, setup, sched.T)
    elif kind is ControllerKind.CAPE:
        prior = build_prior(state.current_plan, m, ctx.start, ctx.goal, pcfg.prior_noise_level, sched,
                            setup.rng, model.normalizer, resolution=model.params.resolution)
        state.current_plan = guided_denoise(prior, pcfg.prior_noise_level, ctx, model, cloud, setup.gcfg,
                                            sched, setup.rng)
        state.refine_count += 1
        state.refine_time += setup.clock() - t0
        _snapshot(state, setup, pcfg.prior_noise_level)
    elif kind is ControllerKind.MPD_REFINE:
        state.current_plan = initial_plan(ctx, model, cloud, setup.gcfg, pcfg, sched, setup.rng)
        state.refine_count += 1
        state.refine_time += setup.clock() - t0
        _snapshot(state, setup, sched.T)
    state.plan_time += setup.clock() - t0

    W = state.current_plan.waypoints
    if kind is ControllerKind.MPD:
        lo = state.plan_cursor + 1
        hi = min(state.plan_cursor + m, N - 1)
        state.plan_cursor = hi
    else:
        lo, hi = 1, m
    executed = [W[i].copy() for i in range(lo, hi + 1)]
    state.executed_path.extend(executed)
    state.iteration += 1

    reached = np.linalg.norm(state.position - state.goal) <= pcfg.goal_tolerance
    exhausted = kind is ControllerKind.MPD and state.plan_cursor >= N - 1
    if reached or exhausted or state.iteration >= setup.max_iterations:
        state.done = True
    return executed


def dump_plans(snapshots, path):
    """Line-delimited JSON, one record per planning pass."""
    with open(path, "w") as fh:
        for rec in snapshots:
            fh.write(json.dumps(rec) + "\n")
