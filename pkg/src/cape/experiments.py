"""Metrics, paired benchmarks, resumable parameter sweeps, and plots."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats

from cape.errors import ConfigError, UsageError
from cape.guidance import GuidanceConfig
from cape.planner import ControllerKind, NoiseModel, PlannerConfig
from cape.schedule import DiffusionSchedule
from cape.seeding import derive_int
from cape.world import (
    Difficulty,
    EpisodeRecord,
    ObservationModel,
    Outcome,
    generate_scene,
    run_episode,
    with_random_start,
)

log = logging.getLogger(__name__)

QUICK_EPISODES = 20
CSV_COLUMNS_HEAD = ["controller", "difficulty", "obs_mode"]
CSV_COLUMNS_TAIL = ["sr", "cr", "ncr", "mean_model_evals", "mean_refine_hz", "n"]

# sweep grid keys and the config object each one lives in
PARAM_FIELDS = {
    "strength": ("guidance", "strength"),
    "start_step": ("guidance", "start_step"),
    "prefix_length": ("planner", "prefix_length"),
    "prior_noise_level": ("planner", "prior_noise_level"),
}
PARAM_ALIASES = {"lambda": "strength", "chi": "start_step", "m": "prefix_length", "delta": "prior_noise_level"}


@dataclass(frozen=True)
class MetricsSummary:
    """Outcome counts plus timing means; rates are exact fractions of the counts."""

    successes: int
    collisions: int
    non_completions: int
    mean_refine_hz: float = 0.0
    mean_model_evals: float = 0.0

    def __post_init__(self):
        if min(self.successes, self.collisions, self.non_completions) < 0:
            raise UsageError("outcome counts must be non-negative")
        if self.episodes < 1:
            raise UsageError("a summary needs at least one episode")

    @property
    def episodes(self) -> int:
        return self.successes + self.collisions + self.non_completions

    @property
    def sr(self) -> Fraction:
        return Fraction(self.successes, self.episodes)

    @property
    def cr(self) -> Fraction:
        return Fraction(self.collisions, self.episodes)

    @property
    def ncr(self) -> Fraction:
        return Fraction(self.non_completions, self.episodes)


def refine_hz(record: EpisodeRecord) -> float | None:
    """Refinement passes per second of refinement time; None when nothing was refined."""
    if record.refine_count == 0 or record.refine_time <= 0:
        return None
    return record.refine_count / record.refine_time


def aggregate(records) -> MetricsSummary:
    records = list(records)
    if not records:
        raise UsageError("cannot aggregate an empty list of episodes")
    counts = {o: 0 for o in Outcome}
    for r in records:
        counts[Outcome(r.outcome)] += 1
    rates = [hz for hz in map(refine_hz, records) if hz is not None]
    return MetricsSummary(
        successes=counts[Outcome.SUCCESS],
        collisions=counts[Outcome.COLLISION],
        non_completions=counts[Outcome.NON_COMPLETION],
        mean_refine_hz=float(np.mean(rates)) if rates else 0.0,
        mean_model_evals=float(np.mean([r.model_eval_count for r in records])),
    )


class EvalClock:
    """Deterministic stand-in for wall time: one tick per model evaluation.

    Plugged into episodes when results must be byte-reproducible; refinement
    rates then count passes per model evaluation.
    """

    def __init__(self, model: NoiseModel, seconds_per_eval: float = 1.0):
        self.model = model
        self.seconds_per_eval = seconds_per_eval

    def __call__(self) -> float:
        return self.model.calls * self.seconds_per_eval


@dataclass(frozen=True)
class EpisodeSpec:
    difficulty: str
    obs_mode: str
    scene_seed: int
    pose: int
    episode_seed: int


def episode_specs(difficulty, obs_mode, scene_seeds, n_poses: int, root_seed: int = 0) -> list[EpisodeSpec]:
    """Scene-major episode list; the same list is reused for every controller (paired design)."""
    difficulty = Difficulty.parse(difficulty).value
    return [
        EpisodeSpec(difficulty, obs_mode, int(s), p, derive_int(root_seed, "episode", difficulty, int(s), p))
        for s in scene_seeds
        for p in range(n_poses)
    ]


def _run_one(spec: EpisodeSpec, params, sched, gcfg, pcfg, obs_model, timing: str) -> EpisodeRecord:
    scene = with_random_start(generate_scene(spec.difficulty, spec.scene_seed, gcfg=gcfg), spec.pose, gcfg=gcfg)
    model = NoiseModel(params)
    clock = EvalClock(model) if timing == "model" else time.perf_counter
    rec = run_episode(scene, model, sched, gcfg, pcfg, obs_model, seed=spec.episode_seed, clock=clock)
    rec.snapshots = []
    return rec


_WORKER: dict = {}


def _worker_init(params, sched):
    _WORKER["params"] = params
    _WORKER["sched"] = sched


def _worker_run(args):
    spec, gcfg, pcfg, obs_model, timing = args
    return _run_one(spec, _WORKER["params"], _WORKER["sched"], gcfg, pcfg, obs_model, timing)


def run_episodes(specs, params, sched: DiffusionSchedule, gcfg: GuidanceConfig, pcfg: PlannerConfig,
                 obs_model: ObservationModel | None = None, jobs: int = 1, timing: str = "wall") -> list:
    """Run ``specs`` in order; with ``jobs > 1`` episodes run in worker processes."""
    if timing not in ("wall", "model"):
        raise ConfigError(f"timing must be 'wall' or 'model', got {timing!r}")
    specs = list(specs)
    if jobs <= 1 or len(specs) <= 1:
        out = []
        for spec in specs:
            obs = obs_model or ObservationModel(spec.obs_mode)
            out.append(_run_one(spec, params, sched, gcfg, pcfg, obs, timing))
        return out
    tasks = [(s, gcfg, pcfg, obs_model or ObservationModel(s.obs_mode), timing) for s in specs]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(params, sched)) as pool:
        return list(pool.map(_worker_run, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


@dataclass
class BenchmarkResult:
    difficulty: str
    obs_mode: str
    specs: list
    records: dict  # controller value -> list[EpisodeRecord], aligned with specs

    @property
    def summaries(self) -> dict:
        return {k: aggregate(v) for k, v in self.records.items()}

    def successes(self, controller) -> np.ndarray:
        kind = ControllerKind.parse(controller).value
        return np.array([r.outcome == Outcome.SUCCESS for r in self.records[kind]])

    def rows(self) -> list[dict]:
        out = []
        for kind, summary in self.summaries.items():
            out.append(summary_row(kind, self.difficulty, self.obs_mode, {}, summary))
        return out


EPISODE_COLUMNS = ["controller", "difficulty", "obs_mode", "scene_seed", "pose", "episode_seed", "outcome",
                   "model_evals", "refine_count", "refine_time", "plan_time", "iterations", "path_length"]


def episode_row(kind: str, spec: EpisodeSpec, rec: EpisodeRecord) -> dict:
    return {
        "controller": kind, "difficulty": spec.difficulty, "obs_mode": spec.obs_mode,
        "scene_seed": str(spec.scene_seed), "pose": str(spec.pose), "episode_seed": str(spec.episode_seed),
        "outcome": Outcome(rec.outcome).value, "model_evals": str(rec.model_eval_count),
        "refine_count": str(rec.refine_count), "refine_time": repr(float(rec.refine_time)),
        "plan_time": repr(float(rec.wall_time)), "iterations": str(rec.iterations),
        "path_length": repr(rec.path_length),
    }


def record_from_row(row: dict) -> EpisodeRecord:
    """Summary-level record rebuilt from a logged row (the executed path is not kept)."""
    return EpisodeRecord(
        outcome=Outcome(row["outcome"]), executed_path=np.zeros((1, 0)),
        model_eval_count=int(row["model_evals"]), refine_count=int(row["refine_count"]),
        wall_time=float(row["plan_time"]), refine_time=float(row["refine_time"]), iterations=int(row["iterations"]),
    )


def run_benchmark(difficulty, obs_mode, controllers, n_scenes: int, n_poses: int, params, sched: DiffusionSchedule,
                  gcfg: GuidanceConfig | None = None, pcfg: PlannerConfig | None = None,
                  obs_model: ObservationModel | None = None, root_seed: int = 0, jobs: int = 1,
                  timing: str = "wall", log_path=None) -> BenchmarkResult:
    """Every controller runs the same scenes, poses, and episode seeds.

    With ``log_path`` each finished episode is appended to a CSV; episodes
    already logged there are read back instead of re-run.
    """
    if n_scenes < 1 or n_poses < 1:
        raise UsageError("need at least one scene and one pose")
    gcfg = gcfg or GuidanceConfig()
    pcfg = pcfg or PlannerConfig()
    obs_model = obs_model or ObservationModel(obs_mode)
    specs = episode_specs(difficulty, obs_model.mode, range(n_scenes), n_poses, root_seed)
    path = Path(log_path) if log_path is not None else None
    done = {}
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        for row in _load_completed(path, EPISODE_COLUMNS):
            key = (row["controller"], row["difficulty"], row["obs_mode"], row["scene_seed"], row["pose"],
                   row["episode_seed"])
            done[key] = row
        if not path.exists() or path.stat().st_size == 0:
            path.write_text(_csv_line(dict(zip(EPISODE_COLUMNS, EPISODE_COLUMNS)), EPISODE_COLUMNS))

    def key_of(kind, s):
        return (kind, s.difficulty, s.obs_mode, str(s.scene_seed), str(s.pose), str(s.episode_seed))

    records = {}
    for c in controllers:
        kind = ControllerKind.parse(c).value
        todo = [s for s in specs if key_of(kind, s) not in done]
        log.info("benchmark %s/%s %s: %d episodes (%d logged)", specs[0].difficulty, obs_model.mode, kind,
                 len(specs), len(specs) - len(todo))
        by_spec = {}
        chunk = 5 * max(1, jobs)
        for i in range(0, len(todo), chunk):
            part = todo[i:i + chunk]
            fresh = run_episodes(part, params, sched, gcfg, replace(pcfg, controller_kind=kind), obs_model,
                                 jobs=jobs, timing=timing)
            for s, rec in zip(part, fresh):
                by_spec[s] = rec
                row = episode_row(kind, s, rec)
                done[key_of(kind, s)] = row
                if path is not None:
                    with open(path, "a") as fh:
                        fh.write(_csv_line(row, EPISODE_COLUMNS))
        records[kind] = [by_spec[s] if s in by_spec else record_from_row(done[key_of(kind, s)]) for s in specs]
    return BenchmarkResult(specs[0].difficulty, obs_model.mode, specs, records)


def quick_layout(n_poses: int = 5) -> tuple[int, int]:
    """(scenes, poses) giving QUICK_EPISODES episodes per cell."""
    n_poses = min(n_poses, QUICK_EPISODES)
    return QUICK_EPISODES // n_poses, n_poses


# ---- statistics -----------------------------------------------------------

def paired_sign_test(better, worse) -> tuple[float, int, int]:
    """One-sided sign test that ``better`` succeeds more often than ``worse`` on paired episodes.

    Returns (p-value, wins, losses); ties are dropped.
    """
    better = np.asarray(better, dtype=bool)
    worse = np.asarray(worse, dtype=bool)
    if better.shape != worse.shape:
        raise UsageError("paired samples must have equal length")
    wins = int(np.sum(better & ~worse))
    losses = int(np.sum(~better & worse))
    if wins + losses == 0:
        return 1.0, 0, 0
    p = stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue
    return float(p), wins, losses


# ---- sweeps -----------------------------------------------------------------

def canonical_param(name: str) -> str:
    key = PARAM_ALIASES.get(name, name)
    if key not in PARAM_FIELDS:
        valid = sorted(set(PARAM_FIELDS) | set(PARAM_ALIASES))
        raise ConfigError(f"unknown sweep parameter {name!r}; valid: {valid}")
    return key


@dataclass
class SweepSpec:
    grid: dict
    scenes: list
    controllers: list
    poses: int = 5
    difficulty: str = "medium"
    obs_mode: str = "limited"
    root_seed: int = 0
    base_guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    base_planner: PlannerConfig = field(default_factory=PlannerConfig)
    # optional extra cells, e.g. a controller-specific grid
    cells: list | None = None

    def __post_init__(self):
        if not self.grid:
            raise ConfigError("sweep grid is empty")
        if not self.scenes:
            raise ConfigError("sweep needs at least one scene")
        if not self.controllers:
            raise ConfigError("sweep needs at least one controller")
        if self.poses < 1:
            raise ConfigError("poses must be >= 1")
        grid = {}
        for name, values in self.grid.items():
            key = canonical_param(name)
            values = list(values)
            if not values:
                raise ConfigError(f"sweep parameter {key} has no values")
            if len(set(values)) != len(values):
                raise ConfigError(f"duplicate values in sweep parameter {key}: {values}")
            if key in grid:
                raise ConfigError(f"sweep parameter {key} given twice")
            grid[key] = values
        self.grid = grid
        if len(set(self.scenes)) != len(self.scenes):
            raise ConfigError("duplicate scene seeds")
        self.controllers = [ControllerKind.parse(c).value for c in self.controllers]
        self.difficulty = Difficulty.parse(self.difficulty).value
        ObservationModel(self.obs_mode)

    @property
    def params(self) -> list[str]:
        return list(self.grid)

    def cell_values(self) -> list[dict]:
        names = self.params
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.grid[n] for n in names))]

    def configs_for(self, values: dict) -> tuple[GuidanceConfig, PlannerConfig]:
        g_kw, p_kw = {}, {}
        for key, val in values.items():
            owner, attr = PARAM_FIELDS[key]
            (g_kw if owner == "guidance" else p_kw)[attr] = val
        return replace(self.base_guidance, **g_kw), replace(self.base_planner, **p_kw)


def csv_columns(params) -> list[str]:
    return CSV_COLUMNS_HEAD + list(params) + CSV_COLUMNS_TAIL


def _fmt_num(v) -> str:
    if isinstance(v, Fraction):
        v = float(v)
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    return str(v)


def summary_row(controller, difficulty, obs_mode, values: dict, summary: MetricsSummary) -> dict:
    row = {"controller": controller, "difficulty": difficulty, "obs_mode": obs_mode}
    row.update({k: _fmt_num(v) for k, v in values.items()})
    row.update(
        sr=_fmt_num(summary.sr), cr=_fmt_num(summary.cr), ncr=_fmt_num(summary.ncr),
        mean_model_evals=_fmt_num(summary.mean_model_evals), mean_refine_hz=_fmt_num(summary.mean_refine_hz),
        n=str(summary.episodes),
    )
    return row


def _row_key(row: dict, params) -> tuple:
    return (row["controller"],) + tuple(row[p] for p in params)


def _load_completed(path: Path, columns) -> list[dict]:
    """Rows already on disk; a torn trailing line from an interrupted run is dropped."""
    if not path.exists():
        return []
    text = path.read_text()
    lines = text.splitlines(keepends=True)
    if not lines:
        return []
    header = next(csv.reader([lines[0]]))
    if header != columns:
        raise ConfigError(f"{path} has columns {header}, expected {columns}; use a fresh output file")
    rows = []
    good = lines[0]
    for ln in lines[1:]:
        if not ln.endswith("\n"):
            break
        vals = next(csv.reader([ln]))
        if len(vals) != len(columns):
            break
        rows.append(dict(zip(columns, vals)))
        good += ln
    if good != text:
        path.write_text(good)
    return rows


def _csv_line(row: dict, columns) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([row[c] for c in columns])
    return buf.getvalue()


def run_sweep(spec: SweepSpec, params, sched: DiffusionSchedule, out_csv=None, jobs: int = 1,
              timing: str = "wall") -> list[dict]:
    """Cartesian product of grid x controllers, each cell over the same paired episodes.

    With ``out_csv`` every finished cell is appended immediately; cells already
    present in the file are skipped, so an interrupted sweep resumes where it
    stopped.
    """
    columns = csv_columns(spec.params)
    path = Path(out_csv) if out_csv is not None else None
    done = {}
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        for row in _load_completed(path, columns):
            done[_row_key(row, spec.params)] = row
        if not path.exists() or path.stat().st_size == 0:
            path.write_text(_csv_line(dict(zip(columns, columns)), columns))
    specs = episode_specs(spec.difficulty, spec.obs_mode, spec.scenes, spec.poses, spec.root_seed)
    obs_model = ObservationModel(spec.obs_mode)
    rows = []
    for values in spec.cell_values():
        gcfg, pcfg = spec.configs_for(values)
        for kind in spec.controllers:
            key = (kind,) + tuple(_fmt_num(values[p]) for p in spec.params)
            if key in done:
                rows.append(done[key])
                continue
            records = run_episodes(specs, params, sched, gcfg, replace(pcfg, controller_kind=kind), obs_model,
                                   jobs=jobs, timing=timing)
            row = summary_row(kind, spec.difficulty, spec.obs_mode, values, aggregate(records))
            rows.append(row)
            if path is not None:
                with open(path, "a") as fh:
                    fh.write(_csv_line(row, columns))
                    fh.flush()
                    os.fsync(fh.fileno())
            log.info("sweep cell %s %s: sr=%s", kind, values, row["sr"])
    return rows


def write_rows(rows, path, params=()) -> Path:
    path = Path(path)
    columns = csv_columns(params)
    with open(path, "w") as fh:
        fh.write(_csv_line(dict(zip(columns, columns)), columns))
        for row in rows:
            fh.write(_csv_line(row, columns))
    return path


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _sr(rows, controller, **values) -> float:
    for r in rows:
        if r["controller"] == controller and all(float(r[k]) == float(v) for k, v in values.items()):
            return float(r["sr"])
    raise UsageError(f"no row for {controller} {values}")


# ---- acceptance checks ------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def check_ordering(bench: BenchmarkResult, min_margin: float = 0.10, alpha: float = 0.05) -> Check:
    s = {k: float(v.sr) for k, v in bench.summaries.items()}
    cape, refine, mpd = s["cape"], s["mpd_refine"], s["mpd"]
    p, wins, losses = paired_sign_test(bench.successes("cape"), bench.successes("mpd"))
    ok = cape >= refine >= mpd and cape - mpd >= min_margin and p < alpha
    return Check(f"controller ordering {bench.difficulty}/{bench.obs_mode}", bool(ok),
                 f"sr cape={cape:.2f} mpd_refine={refine:.2f} mpd={mpd:.2f}; "
                 f"sign test cape>mpd p={p:.4f} ({wins} wins, {losses} losses)")


def check_gap(bench: BenchmarkResult, min_gap: float = 0.15) -> Check:
    s = {k: float(v.sr) for k, v in bench.summaries.items()}
    gap = s["cape"] - s["mpd"]
    return Check(f"cape-mpd gap {bench.difficulty}/{bench.obs_mode}", bool(gap >= min_gap),
                 f"sr cape={s['cape']:.2f} mpd={s['mpd']:.2f} gap={gap:.2f} (need >= {min_gap})")


def check_refine_economy(bench: BenchmarkResult, delta: int, T: int, min_speedup: float = 3.0) -> Check:
    evals = {}
    for kind in ("cape", "mpd_refine"):
        recs = [r for r in bench.records[kind] if r.refine_count > 0]
        # every episode starts with one full-length plan before any refinement
        per_cycle = {(r.model_eval_count - T) / r.refine_count for r in recs}
        evals[kind] = per_cycle
    hz = {k: float(bench.summaries[k].mean_refine_hz) for k in ("cape", "mpd_refine")}
    speedup = hz["cape"] / hz["mpd_refine"] if hz["mpd_refine"] > 0 else float("inf")
    ok = evals["cape"] == {float(delta)} and evals["mpd_refine"] == {float(T)} and speedup >= min_speedup
    return Check("refinement economy", bool(ok),
                 f"evals/cycle cape={sorted(evals['cape'])} mpd_refine={sorted(evals['mpd_refine'])} "
                 f"(ratio {T / delta:g}); refine Hz cape={hz['cape']:.1f} mpd_refine={hz['mpd_refine']:.1f} "
                 f"speedup={speedup:.2f}")


def check_lambda_robustness(rows) -> Check:
    def spread(kind):
        vals = [float(r["sr"]) for r in rows if r["controller"] == kind]
        return max(vals) - min(vals)
    a, b = spread("cape"), spread("mpd_refine")
    return Check("guidance-strength robustness", bool(a < b), f"sr range cape={a:.2f} mpd_refine={b:.2f}")


def check_prefix_noise(rows) -> Check:
    short = _sr(rows, "cape", prefix_length=2, prior_noise_level=2)
    long = _sr(rows, "cape", prefix_length=10, prior_noise_level=10)
    return Check("prefix/noise sweep", bool(short >= long), f"sr(m=2,delta=2)={short:.2f} sr(m=10,delta=10)={long:.2f}")


def check_start_step(rows, center: int = 5, window: int = 2, flat: float = 0.05) -> Check:
    pts = sorted((int(float(r["start_step"])), float(r["sr"])) for r in rows if r["controller"] == "cape")
    srs = [s for _, s in pts]
    best = max(srs)
    argmax = [c for c, s in pts if s == best]
    spread = best - min(srs)
    ok = any(abs(c - center) <= window for c in argmax) or spread < flat
    return Check("guidance start step sweep", bool(ok), f"sr by chi={dict(pts)}; spread={spread:.2f}")


def write_verdict(checks, path) -> Path:
    path = Path(path)
    doc = {"checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in checks],
           "all_passed": all(c.passed for c in checks)}
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


# ---- plots ------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cape"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path: Path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_sr_curves(rows, out_dir, params) -> list[Path]:
    """One SR-versus-value figure per swept parameter (other parameters at their first value)."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    paths = []
    for p in params:
        others = [q for q in params if q != p]
        fixed = {q: min(float(r[q]) for r in rows) for q in others}
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for kind in sorted({r["controller"] for r in rows}):
            pts = sorted(
                (float(r[p]), float(r["sr"])) for r in rows
                if r["controller"] == kind and all(float(r[q]) == v for q, v in fixed.items())
            )
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", label=kind)
        ax.set_xlabel(p)
        ax.set_ylabel("success rate")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"sr_vs_{p}.svg"
        _save(fig, path)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_episode(scene, record: EpisodeRecord, path, title: str = "") -> Path:
    """Obstacles, start/goal, per-iteration plans, and the executed path."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for ob in scene.obstacles:
        ax.add_patch(plt.Circle(ob.center, ob.radius, color="0.2"))
    snaps = record.snapshots
    for k, snap in enumerate(snaps):
        W = np.asarray(snap["waypoints"])
        ax.plot(W[:, 0], W[:, 1], lw=0.6, color=plt.cm.viridis(k / max(1, len(snaps) - 1)), alpha=0.7)
    P = np.asarray(record.executed_path)
    ax.plot(P[:, 0], P[:, 1], color="tab:blue", lw=1.8, label="executed")
    ax.plot(*scene.start, "o", color="tab:green", label="start")
    ax.plot(*scene.goal, "*", color="tab:red", ms=12, label="goal")
    (lo, hi) = scene.bounds
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_aspect("equal")
    ax.set_title(title or f"{Outcome(record.outcome).value}")
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    plt.close(fig)
    return path


def emit_plots(out_dir, rows=(), params=(), episodes=()) -> list[Path]:
    """Write SR curves for ``rows`` and overlays for ``episodes`` = [(label, scene, record)]."""
    rows, episodes = list(rows), list(episodes)
    if not rows and not episodes:
        raise UsageError("nothing to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = plot_sr_curves(rows, out_dir, params) if rows and params else []
    for label, scene, record in episodes:
        paths.append(plot_episode(scene, record, out_dir / f"episode_{label}.svg", title=label))
    return paths
