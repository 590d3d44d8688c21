"""Obstacle-free demonstration data: RRT paths, fixed-length normalization, augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cape.denoiser import TaskContext
from cape.errors import GenerationError, LoadError, UsageError
from cape.polyline import normalize_length, resample_arclength  # noqa: F401  (re-exported)
from cape.schedule import Trajectory

DATASET_MAGIC = b"CAPE-DATA\n"
DATASET_VERSION = 1

DEFAULT_BOUNDS = ((0.0, 0.0), (1.0, 1.0))
MIN_SEPARATION = 0.4
# Demonstrations advance about this far per waypoint; short paths end in padding.
DEFAULT_RESOLUTION = 0.03


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    contexts: list[TaskContext]
    N: int
    d: int
    bounds: tuple = DEFAULT_BOUNDS
    seed: int = 0
    resolution: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trajectories) != len(self.contexts):
            raise UsageError("trajectories and contexts differ in length")

    @property
    def count(self) -> int:
        return len(self.trajectories)

    def __len__(self):
        return self.count

    def array(self) -> np.ndarray:
        if not self.trajectories:
            return np.zeros((0, self.N, self.d))
        return np.stack([t.waypoints for t in self.trajectories])


def rrt_plan(start, goal, bounds=DEFAULT_BOUNDS, seed=0, step_size=0.05, max_nodes=5000,
             goal_bias=0.1, segment_free=None) -> np.ndarray:
    """Grow an RRT from ``start`` until ``goal`` is within one step; return the polyline.

    ``segment_free(a, b)`` may veto edges; by default the workspace is empty.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    if np.any(start < lo) or np.any(start > hi) or np.any(goal < lo) or np.any(goal > hi):
        raise UsageError("start and goal must lie inside the bounds")
    rng = np.random.default_rng(seed)
    nodes = [start]
    parents = [-1]
    pts = np.empty((max_nodes, start.size))
    pts[0] = start

    def free(a, b):
        return segment_free is None or segment_free(a, b)

    if np.linalg.norm(goal - start) <= step_size and free(start, goal):
        return np.stack([start, goal])
    while len(nodes) < max_nodes:
        target = goal if rng.random() < goal_bias else rng.uniform(lo, hi)
        k = len(nodes)
        near = int(np.argmin(np.sum((pts[:k] - target) ** 2, axis=1)))
        delta = target - nodes[near]
        dist = np.linalg.norm(delta)
        if dist < 1e-12:
            continue
        new = nodes[near] + delta * min(1.0, step_size / dist)
        if not free(nodes[near], new):
            continue
        nodes.append(new)
        parents.append(near)
        pts[k] = new
        if np.linalg.norm(goal - new) <= step_size and free(new, goal):
            path = [goal]
            i = k
            while i >= 0:
                path.append(nodes[i])
                i = parents[i]
            path = np.stack(path[::-1])
            path[0] = start
            return path
    raise GenerationError(f"RRT did not reach the goal within {max_nodes} nodes")


def shortcut(path, attempts=20, seed=0, segment_free=None) -> np.ndarray:
    """Random pair shortcutting: replace the span between two vertices by a chord."""
    path = np.asarray(path, dtype=float)
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        if len(path) <= 2:
            break
        i, j = sorted(rng.choice(len(path), size=2, replace=False))
        if j - i < 2:
            continue
        if segment_free is None or segment_free(path[i], path[j]):
            path = np.concatenate([path[:i + 1], path[j:]])
    return path


def smooth(path, iterations=10, weight=0.5) -> np.ndarray:
    """Laplacian smoothing of interior vertices; endpoints stay fixed."""
    p = np.asarray(path, dtype=float).copy()
    for _ in range(iterations):
        p[1:-1] = (1.0 - weight) * p[1:-1] + weight * 0.5 * (p[:-2] + p[2:])
    return p


def sample_task(rng, bounds=DEFAULT_BOUNDS, margin=0.05, min_separation=MIN_SEPARATION):
    lo = np.asarray(bounds[0], float) + margin
    hi = np.asarray(bounds[1], float) - margin
    for _ in range(10_000):
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
        if np.linalg.norm(a - b) >= min_separation:
            return a, b
    raise GenerationError("could not sample a start/goal pair with the required separation")


def generate_dataset(count=1000, N=32, d=2, seed=0, bounds=None, step_size=0.05, goal_bias=0.05,
                     shortcut_attempts=0, smooth_iterations=3, resolution=DEFAULT_RESOLUTION) -> TrajectoryDataset:
    """Base RRT demonstrations in an empty workspace, one derived seed per trajectory.

    In empty space every shortcut is valid, so shortcutting collapses paths to
    straight chords; Laplacian smoothing is the default post-processing instead.
    """
    if count < 1:
        raise UsageError("count must be >= 1")
    if bounds is None:
        bounds = (tuple([0.0] * d), tuple([1.0] * d))
    trajs, ctxs = [], []
    for i in range(count):
        task_seq, rrt_seq, sc_seq = np.random.SeedSequence([seed, i]).spawn(3)
        s, g = sample_task(np.random.default_rng(task_seq), bounds)
        path = rrt_plan(s, g, bounds, seed=rrt_seq, step_size=step_size, goal_bias=goal_bias)
        if shortcut_attempts:
            path = shortcut(path, attempts=shortcut_attempts, seed=sc_seq)
        path = smooth(path, iterations=smooth_iterations)
        tr = normalize_length(path, N, resolution=resolution)
        trajs.append(tr)
        ctxs.append(TaskContext(tr.waypoints[0].copy(), tr.waypoints[-1].copy()))
    return TrajectoryDataset(trajs, ctxs, N=N, d=d, bounds=_bounds_tuple(bounds), seed=seed,
                             resolution=resolution)


def augment_starts(dataset: TrajectoryDataset, k_per_traj: int, seed: int) -> TrajectoryDataset:
    """Add ``k_per_traj`` suffixes per trajectory, each starting at a random interior waypoint.

    Suffixes are re-normalized to N with the dataset's own rule. Padding
    waypoints that already sit on the goal are not eligible starts.
    """
    if dataset.count == 0:
        raise UsageError("cannot augment an empty dataset")
    if k_per_traj == 0:
        return dataset
    rng = np.random.default_rng(seed)
    trajs, ctxs = list(dataset.trajectories), list(dataset.contexts)
    N = dataset.N
    for tr, ctx in zip(dataset.trajectories, dataset.contexts):
        for _ in range(k_per_traj):
            W = tr.waypoints
            moving = np.flatnonzero(np.any(W[1:-1] != ctx.goal, axis=1)) + 1
            i = int(rng.choice(moving)) if moving.size else 1
            w = normalize_length(W[i:], N, dataset.resolution).waypoints
            w[-1] = ctx.goal
            trajs.append(Trajectory(w))
            ctxs.append(TaskContext(w[0].copy(), ctx.goal.copy()))
    return TrajectoryDataset(trajs, ctxs, N=N, d=dataset.d, bounds=dataset.bounds, seed=dataset.seed,
                             resolution=dataset.resolution, meta=dict(dataset.meta, augmented=k_per_traj))


def _bounds_tuple(bounds):
    return (tuple(float(v) for v in bounds[0]), tuple(float(v) for v in bounds[1]))


def write_dataset(dataset: TrajectoryDataset, path) -> Path:
    path = Path(path)
    header = {
        "version": DATASET_VERSION, "N": dataset.N, "d": dataset.d, "count": dataset.count,
        "bounds": [list(dataset.bounds[0]), list(dataset.bounds[1])], "seed": dataset.seed,
        "resolution": dataset.resolution,
    }
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(dataset.array().astype("<f8").tobytes())
    return path


def read_dataset(path) -> TrajectoryDataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(DATASET_MAGIC):
        raise LoadError("not a dataset file (bad magic)", field="magic")
    rest = raw[len(DATASET_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise LoadError("dataset header truncated", field="header")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise LoadError(f"dataset header unreadable: {exc}", field="header") from None
    if header.get("version") != DATASET_VERSION:
        raise LoadError(f"unsupported dataset version {header.get('version')}", field="version")
    for key in ("N", "d", "count"):
        if not isinstance(header.get(key), int) or header[key] < 0:
            raise LoadError(f"header field {key} missing or invalid", field=key)
    N, d, count = header["N"], header["d"], header["count"]
    payload = rest[nl + 1:]
    if len(payload) % (8 * N * d or 1) != 0:
        raise LoadError(f"payload of {len(payload)} bytes is not a whole number of {N}x{d} trajectories",
                        field="N" if len(payload) % 8 == 0 else "payload")
    if len(payload) != 8 * N * d * count:
        raise LoadError(f"header count={count} but payload holds {len(payload) // (8 * N * d or 1)} trajectories",
                        field="count")
    arr = np.frombuffer(payload, dtype="<f8").astype(float).reshape(count, N, d)
    trajs = [Trajectory(a.copy()) for a in arr]
    ctxs = [TaskContext(a[0].copy(), a[-1].copy()) for a in arr]
    return TrajectoryDataset(trajs, ctxs, N=N, d=d, bounds=_bounds_tuple(header["bounds"]), seed=header["seed"],
                             resolution=header.get("resolution"))
