"""Cluttered disk/sphere worlds, observation models, and episode execution."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cape.errors import ConfigError, GenerationError, LoadError
from cape.guidance import GuidanceConfig, ObstaclePointCloud
from cape.planner import (
    NoiseModel,
    PlannerConfig,
    PlannerSetup,
    start_state,
    step_controller,
)
from cape.schedule import DiffusionSchedule
from cape.seeding import stream

SMALL, MEDIUM_R, LARGE = 0.02, 0.05, 0.08
# (count, radius) per size class
LAYOUTS = {
    "empty": [],
    "easy": [(25, SMALL)],
    "medium": [(15, SMALL), (2, MEDIUM_R)],
    "hard": [(25, SMALL), (2, LARGE)],
}
UNIT_BOUNDS = ((0.0, 0.0), (1.0, 1.0))
MIN_TRAVEL = 0.4
MAX_REJECTIONS = 1000


class Difficulty(str, enum.Enum):
    EMPTY = "empty"
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"

    @classmethod
    def parse(cls, v) -> Difficulty:
        try:
            return v if isinstance(v, cls) else cls(str(v).lower())
        except ValueError:
            raise ConfigError(f"unknown difficulty {v!r}; valid: {[d.value for d in cls]}") from None


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    COLLISION = "collision"
    NON_COMPLETION = "non_completion"


@dataclass(frozen=True)
class Obstacle:
    center: tuple
    radius: float


@dataclass
class Scene:
    bounds: tuple
    obstacles: list
    start: np.ndarray
    goal: np.ndarray
    difficulty: Difficulty = Difficulty.EMPTY
    seed: int = 0

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        self.difficulty = Difficulty.parse(self.difficulty)

    @property
    def d(self) -> int:
        return self.start.size

    @property
    def centers(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, self.d))
        return np.array([o.center for o in self.obstacles], dtype=float)

    @property
    def radii(self) -> np.ndarray:
        return np.array([o.radius for o in self.obstacles], dtype=float)

    def clearance(self, p) -> float:
        """Distance from ``p`` to the nearest obstacle surface (inf when empty)."""
        if not self.obstacles:
            return np.inf
        return float(np.min(np.linalg.norm(self.centers - np.asarray(p), axis=1) - self.radii))


@dataclass(frozen=True)
class ObservationModel:
    mode: str = "full"
    sensing_radius: float = 0.25
    samples_per_obstacle: int = 64

    def __post_init__(self):
        mode = str(self.mode).lower()
        if mode not in ("full", "limited"):
            raise ConfigError(f"observation mode must be 'full' or 'limited', got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if mode == "limited" and not self.sensing_radius > 0:
            raise ConfigError("sensing_radius must be > 0 in limited mode")
        if self.samples_per_obstacle < 1:
            raise ConfigError("samples_per_obstacle must be >= 1")


@dataclass
class EpisodeRecord:
    outcome: Outcome
    executed_path: np.ndarray
    model_eval_count: int
    refine_count: int
    wall_time: float
    refine_time: float = 0.0
    iterations: int = 0
    snapshots: list = field(default_factory=list, repr=False)

    @property
    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.executed_path, axis=0), axis=1)))


def _min_clearance(cfg: GuidanceConfig | None) -> float:
    cfg = cfg or GuidanceConfig()
    return cfg.eef_radius + cfg.safety_margin


def _sample_free_point(rng, lo, hi, centers, radii, need, margin=0.05):
    for _ in range(MAX_REJECTIONS):
        p = rng.uniform(lo + margin, hi - margin)
        if len(centers) == 0 or np.all(np.linalg.norm(centers - p, axis=1) - radii >= need):
            return p
    raise GenerationError("could not place a collision-free pose; scene too dense")


def generate_scene(difficulty, seed: int, bounds=UNIT_BOUNDS, gcfg: GuidanceConfig | None = None) -> Scene:
    """Random layout for ``difficulty``; deterministic in ``seed``.

    Start and goal are drawn first (at least MIN_TRAVEL apart), then each
    obstacle is rejection-sampled until both keep the required clearance.
    """
    difficulty = Difficulty.parse(difficulty)
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    rng = stream(seed, "scene", difficulty.value)
    need = _min_clearance(gcfg)
    for _ in range(MAX_REJECTIONS):
        start = rng.uniform(lo + 0.05, hi - 0.05)
        goal = rng.uniform(lo + 0.05, hi - 0.05)
        if np.linalg.norm(goal - start) >= MIN_TRAVEL:
            break
    else:
        raise GenerationError("could not draw start/goal with the minimum travel distance")
    obstacles = []
    for count, radius in LAYOUTS[difficulty.value]:
        for _ in range(count):
            for _attempt in range(MAX_REJECTIONS):
                c = rng.uniform(lo, hi)
                if (np.linalg.norm(c - start) - radius >= need) and (np.linalg.norm(c - goal) - radius >= need):
                    obstacles.append(Obstacle(tuple(float(v) for v in c), float(radius)))
                    break
            else:
                raise GenerationError(f"{MAX_REJECTIONS} rejected placements: scene too dense")
    return Scene(bounds=_bounds_tuple(bounds), obstacles=obstacles, start=start, goal=goal,
                 difficulty=difficulty, seed=seed)


def with_random_start(scene: Scene, pose_seed: int, gcfg: GuidanceConfig | None = None) -> Scene:
    """Same layout and goal, new collision-free robot start at least MIN_TRAVEL from the goal."""
    rng = stream(scene.seed, "pose", pose_seed)
    lo, hi = np.asarray(scene.bounds[0], float), np.asarray(scene.bounds[1], float)
    need = _min_clearance(gcfg)
    for _ in range(MAX_REJECTIONS):
        p = _sample_free_point(rng, lo, hi, scene.centers, scene.radii, need)
        if np.linalg.norm(p - scene.goal) >= MIN_TRAVEL:
            return Scene(scene.bounds, list(scene.obstacles), p, scene.goal.copy(), scene.difficulty, scene.seed)
    raise GenerationError("could not draw a start pose far enough from the goal")


def surface_samples(scene: Scene, samples_per_obstacle: int = 64) -> np.ndarray:
    """Deterministic boundary points, obstacle-major (M = count * samples)."""
    if not scene.obstacles:
        return np.zeros((0, scene.d))
    rng = stream(scene.seed, "surface", samples_per_obstacle)
    k = samples_per_obstacle
    out = []
    for ob in scene.obstacles:
        c = np.asarray(ob.center)
        if scene.d == 2:
            phase = rng.uniform(0, 2 * np.pi / k)
            ang = phase + 2 * np.pi * np.arange(k) / k
            dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            # Fibonacci lattice, randomly rotated
            i = np.arange(k) + 0.5
            phi = np.arccos(1 - 2 * i / k)
            theta = np.pi * (1 + 5**0.5) * i
            dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
            q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
            dirs = dirs @ q.T
        out.append(c + ob.radius * dirs)
    return np.concatenate(out)


class Observer:
    """Produces the planner's point cloud; caches the scene's full sample set."""

    def __init__(self, scene: Scene, model: ObservationModel):
        self.scene = scene
        self.model = model
        self.samples = surface_samples(scene, model.samples_per_obstacle)
        self.seen = np.zeros(len(self.samples), dtype=bool)

    def observe(self, robot_position) -> ObstaclePointCloud:
        if self.model.mode == "full":
            self.seen[:] = True
        elif len(self.samples):
            dist = np.linalg.norm(self.samples - np.asarray(robot_position), axis=1)
            self.seen |= dist <= self.model.sensing_radius
        return ObstaclePointCloud(self.samples[self.seen])


def observe(scene: Scene, robot_position, model: ObservationModel, accumulated: ObstaclePointCloud | None = None
            ) -> ObstaclePointCloud:
    """Stateless form: previously accumulated points plus what is visible now."""
    obs = Observer(scene, model)
    if accumulated is not None and accumulated.M and len(obs.samples):
        index = {tuple(row): i for i, row in enumerate(obs.samples)}
        for row in accumulated.points:
            i = index.get(tuple(row))
            if i is not None:
                obs.seen[i] = True
    return obs.observe(robot_position)


def segment_point_distance(a, b, c) -> np.ndarray:
    """Distance from segment ab to each row of points ``c``."""
    a, b, c = np.asarray(a, float), np.asarray(b, float), np.atleast_2d(np.asarray(c, float))
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(c - a, axis=1)
    s = np.clip(((c - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(c - (a + s[:, None] * ab), axis=1)


def check_segment_collision(a, b, scene: Scene, r_eef: float) -> bool:
    """Swept-sphere test; touching at exactly radius + r_eef is not a collision."""
    if not scene.obstacles:
        return False
    return bool(np.any(segment_point_distance(a, b, scene.centers) < scene.radii + r_eef))


def path_collides(path, scene: Scene, r_eef: float) -> bool:
    path = np.asarray(path, dtype=float)
    return any(check_segment_collision(path[i], path[i + 1], scene, r_eef) for i in range(len(path) - 1))


def run_episode(scene: Scene, model, sched: DiffusionSchedule, gcfg: GuidanceConfig, pcfg: PlannerConfig,
                obs_model: ObservationModel | None = None, seed: int = 0, record_plans: bool = False,
                clock=time.perf_counter) -> EpisodeRecord:
    """Closed-loop episode: observe, plan/refine, execute a prefix, check contacts.

    The planner only ever sees point clouds produced by the observer.
    """
    model = model if isinstance(model, NoiseModel) else NoiseModel(model)
    obs_model = obs_model or ObservationModel()
    calls0 = model.calls
    setup = PlannerSetup(model=model, sched=sched, gcfg=gcfg, pcfg=pcfg,
                         rng=stream(seed, "episode", "planner"),
                         record_plans=record_plans, clock=clock)
    state = start_state(scene.start, scene.goal, setup)
    observer = Observer(scene, obs_model)
    outcome = None
    while not state.done:
        cloud = observer.observe(state.position)
        prev = state.position.copy()
        executed = step_controller(state, cloud, setup)
        pts = [prev] + executed
        if any(check_segment_collision(pts[i], pts[i + 1], scene, gcfg.eef_radius) for i in range(len(executed))):
            outcome = Outcome.COLLISION
            break
    if outcome is None:
        reached = np.linalg.norm(state.position - state.goal) <= pcfg.goal_tolerance
        outcome = Outcome.SUCCESS if reached else Outcome.NON_COMPLETION
    return EpisodeRecord(
        outcome=outcome,
        executed_path=np.array(state.executed_path),
        model_eval_count=model.calls - calls0,
        refine_count=state.refine_count,
        wall_time=state.plan_time,
        refine_time=state.refine_time,
        iterations=state.iteration,
        snapshots=state.snapshots,
    )


def _bounds_tuple(bounds):
    return (tuple(float(v) for v in bounds[0]), tuple(float(v) for v in bounds[1]))


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_scene(scene: Scene, path) -> Path:
    path = Path(path)
    lines = [
        "# cape scene v1",
        f"d = {scene.d}",
        f"difficulty = {scene.difficulty.value}",
        f"seed = {scene.seed}",
        "bounds_lo = " + " ".join(_fmt(v) for v in scene.bounds[0]),
        "bounds_hi = " + " ".join(_fmt(v) for v in scene.bounds[1]),
        "start = " + " ".join(_fmt(v) for v in scene.start),
        "goal = " + " ".join(_fmt(v) for v in scene.goal),
        f"obstacles = {len(scene.obstacles)}",
        "---",
    ]
    lines += [" ".join(_fmt(v) for v in ob.center) + " " + _fmt(ob.radius) for ob in scene.obstacles]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_scene(path) -> Scene:
    lines = Path(path).read_text().splitlines()
    if "---" not in lines:
        raise LoadError("scene file lacks the '---' header terminator", field="header")
    cut = lines.index("---")
    header = {}
    for ln in lines[:cut]:
        if ln.startswith("#") or not ln.strip():
            continue
        key, _, val = ln.partition("=")
        header[key.strip()] = val.strip()
    try:
        d = int(header["d"])
        vec = {k: np.array([float(x) for x in header[k].split()]) for k in ("bounds_lo", "bounds_hi", "start", "goal")}
        n_obs = int(header["obstacles"])
        difficulty, seed = header["difficulty"], int(header["seed"])
    except KeyError as exc:
        raise LoadError(f"scene header lacks {exc.args[0]}", field=exc.args[0]) from None
    except ValueError as exc:
        raise LoadError(f"scene header malformed: {exc}", field="header") from None
    for k, v in vec.items():
        if v.size != d:
            raise LoadError(f"{k} has {v.size} coordinates, expected d={d}", field=k)
    body = [ln for ln in lines[cut + 1:] if ln.strip()]
    if len(body) != n_obs:
        raise LoadError(f"header says {n_obs} obstacles, file has {len(body)}", field="obstacles")
    obstacles = []
    for ln in body:
        vals = [float(x) for x in ln.split()]
        if len(vals) != d + 1:
            raise LoadError(f"obstacle line needs {d} coordinates and a radius: {ln!r}", field="obstacles")
        obstacles.append(Obstacle(tuple(vals[:d]), vals[d]))
    return Scene((tuple(vec["bounds_lo"]), tuple(vec["bounds_hi"])), obstacles, vec["start"], vec["goal"],
                 difficulty, seed)
