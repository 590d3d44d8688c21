"""Command-line entry point: gen-data, train, plan, bench, sweep."""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from cape.datagen import augment_starts, generate_dataset, read_dataset, write_dataset
from cape.denoiser import TrainingConfig, load_checkpoint, save_checkpoint, train
from cape.errors import CapeError, ConfigError, UsageError
from cape.experiments import (
    check_gap,
    check_lambda_robustness,
    check_ordering,
    check_prefix_noise,
    check_refine_economy,
    check_start_step,
    emit_plots,
    quick_layout,
    run_benchmark,
    run_sweep,
    SweepSpec,
    write_rows,
    write_verdict,
)
from cape.guidance import GuidanceConfig
from cape.planner import ControllerKind, NoiseModel, PlannerConfig, dump_plans
from cape.schedule import make_schedule
from cape.world import ObservationModel, Outcome, generate_scene, read_scene, run_episode, with_random_start

log = logging.getLogger("cape")

OUTPUT_ROOT_ENV = "CAPE_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "cape-runs"
EXIT_CODES = {Outcome.SUCCESS: 0, Outcome.COLLISION: 2, Outcome.NON_COMPLETION: 3}
EXIT_USAGE = 1

# Every leaf is the default; nested sections mirror the module configs.
DEFAULTS = {
    "seed": 0,
    "data": {"count": 1000, "n": 32, "dim": 2, "augment": 1, "resolution": 0.03},
    "diffusion": {"steps": 25, "beta_min": 1e-4, "beta_max": 0.8},
    "training": {"epochs": 80, "lr": 1e-4, "batch_size": 256, "hidden": 256, "depth": 4, "time_dim": 32,
                 "quick_epochs": 20},
    "guidance": {"lambda": 0.2, "chi": 5, "eef_radius": 0.08, "safety_margin": 0.06, "step_length": 0.03},
    "planner": {"m": 2, "delta": 2, "goal_tolerance": 0.02, "max_iterations": None},
    "observation": {"mode": "full", "sensing_radius": 0.25, "samples_per_obstacle": 64},
    "bench": {
        "difficulty": "medium",
        "obs_modes": ["full", "limited"],
        "controllers": ["mpd", "mpd_refine", "cape"],
        "n_scenes": 20,
        "n_poses": 5,
        "timing": "wall",
    },
    "sweep": {
        "difficulty": "medium",
        "n_scenes": 20,
        "n_poses": 5,
        "timing": "model",
        "studies": {
            "lambda": {"grid": {"lambda": [0.1, 0.2, 0.5, 1.0]}, "controllers": ["cape", "mpd_refine"],
                       "obs_mode": "full"},
            "prefix_noise": {"grid": {"m": [2, 10], "delta": [2, 10]}, "controllers": ["cape"], "obs_mode": "full"},
            "start_step": {"grid": {"chi": [2, 3, 4, 5, 6, 7, 8, 9]}, "controllers": ["cape"],
                           "obs_mode": "limited"},
        },
    },
}
# sections whose children are user-named, so only their inner layout is checked
FREE_SECTIONS = {("sweep", "studies"): {"grid", "controllers", "obs_mode"}}


def merge_config(base: dict, override: dict, path: tuple = ()) -> dict:
    """Recursive merge that rejects keys the defaults do not know, naming the full key path."""
    out = copy.deepcopy(base)
    if not isinstance(override, dict):
        raise ConfigError(f"config section {'.'.join(path) or '<root>'} must be a mapping")
    for key, val in override.items():
        here = path + (str(key),)
        dotted = ".".join(here)
        if path in FREE_SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"config section {dotted} must be a mapping")
            extra = set(val) - FREE_SECTIONS[path]
            if extra:
                raise ConfigError(f"unknown config key {dotted}.{sorted(extra)[0]}")
            if "grid" not in val:
                raise ConfigError(f"config section {dotted} needs a grid")
            out[key] = copy.deepcopy(val)
            continue
        if key not in base:
            raise ConfigError(f"unknown config key {dotted}")
        if isinstance(base[key], dict):
            out[key] = merge_config(base[key], val, here)
            if here in FREE_SECTIONS and val:
                out[key] = {k: v for k, v in out[key].items() if k in val}
        else:
            if isinstance(val, dict):
                raise ConfigError(f"config key {dotted} takes a value, not a section")
            out[key] = val
    return out


def load_config(path=None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    cfg = merge_config(DEFAULTS, doc)
    build_configs(cfg)
    return cfg


def build_configs(cfg: dict) -> dict:
    """Construct (and thereby validate) every typed config from the tree."""
    g, p, o, t, dif = cfg["guidance"], cfg["planner"], cfg["observation"], cfg["training"], cfg["diffusion"]
    try:
        sched = make_schedule(dif["steps"], dif["beta_min"], dif["beta_max"])
        gcfg = GuidanceConfig(strength=float(g["lambda"]), start_step=g["chi"], eef_radius=float(g["eef_radius"]),
                              safety_margin=float(g["safety_margin"]), step_length=float(g["step_length"]))
        pcfg = PlannerConfig(prefix_length=int(p["m"]), prior_noise_level=int(p["delta"]),
                             goal_tolerance=float(p["goal_tolerance"]), max_iterations=p["max_iterations"])
        obs = ObservationModel(o["mode"], float(o["sensing_radius"]), int(o["samples_per_obstacle"]))
        tcfg = TrainingConfig(learning_rate=float(t["lr"]), epochs=t["epochs"], batch_size=int(t["batch_size"]),
                              seed=int(cfg["seed"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CapeError):
            raise
        raise ConfigError(f"bad config value: {exc}") from None
    pcfg.validate_for(cfg["data"]["n"], sched.T)
    gcfg.validate_for(sched.T)
    return {"sched": sched, "guidance": gcfg, "planner": pcfg, "observation": obs, "training": tcfg}


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def echo_config(cfg: dict, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def _refuse_overwrite(path: Path, force: bool):
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def parse_scene(arg: str, gcfg: GuidanceConfig):
    """A scene file path, or ``difficulty:seed[:pose]``."""
    if Path(arg).exists():
        return read_scene(arg)
    parts = arg.split(":")
    if len(parts) not in (2, 3):
        raise UsageError(f"--scene must be a scene file or difficulty:seed[:pose], got {arg!r}")
    try:
        seed = int(parts[1])
        pose = int(parts[2]) if len(parts) == 3 else None
    except ValueError:
        raise UsageError(f"--scene seed and pose must be integers, got {arg!r}") from None
    scene = generate_scene(parts[0], seed, gcfg=gcfg)
    return with_random_start(scene, pose, gcfg=gcfg) if pose is not None else scene


def _override(cfg: dict, section: str, key: str, value):
    if value is not None:
        cfg[section][key] = value


# ---- subcommands ------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    _override(cfg, "data", "count", args.count)
    _override(cfg, "data", "n", args.n)
    _override(cfg, "data", "dim", args.dim)
    _override(cfg, "data", "augment", args.augment)
    if args.seed is not None:
        cfg["seed"] = args.seed
    data = cfg["data"]
    if data["count"] < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out) if args.out else output_root() / "data" / "dataset.bin"
    _refuse_overwrite(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(count=data["count"], N=data["n"], d=data["dim"], seed=cfg["seed"],
                          resolution=data["resolution"])
    if data["augment"]:
        ds = augment_starts(ds, data["augment"], seed=cfg["seed"] + 1)
    write_dataset(ds, out)
    echo_config(cfg, out.parent)
    print(f"wrote {ds.count} trajectories to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    t = cfg["training"]
    _override(cfg, "training", "epochs", args.epochs)
    _override(cfg, "training", "lr", args.lr)
    _override(cfg, "training", "batch_size", args.batch_size)
    if args.quick and args.epochs is None:
        t["epochs"] = t["quick_epochs"]
    if args.seed is not None:
        cfg["seed"] = args.seed
    if not args.data:
        raise UsageError("train needs --data")
    typed = build_configs(cfg)
    ds = read_dataset(args.data)
    out = Path(args.out) if args.out else output_root() / "model.ckpt"
    _refuse_overwrite(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)

    def report(epoch, loss):
        log.info("epoch %d/%d loss %.5f", epoch + 1, t["epochs"], loss)

    res = train(ds, typed["training"], typed["sched"], hidden=t["hidden"], depth=t["depth"],
                time_dim=t["time_dim"], callback=report)
    save_checkpoint(res.params, out)
    echo_config(cfg, out.parent)
    print(f"initial loss {res.initial_loss:.6f}")
    print(f"final loss {res.final_loss:.6f}")
    print(f"wrote checkpoint {out}")
    return 0


def _load_model(path, cfg):
    if not path:
        raise UsageError("--ckpt is required")
    params = load_checkpoint(path)
    T = cfg["diffusion"]["steps"]
    if params.T != T:
        raise ConfigError(f"checkpoint was trained with T={params.T}, config has diffusion.steps={T}")
    return params, make_schedule(params.T, params.beta_min, params.beta_max)


def cmd_plan(args, cfg) -> int:
    kind = ControllerKind.parse(args.controller)
    _override(cfg, "guidance", "lambda", args.strength)
    _override(cfg, "guidance", "chi", args.chi)
    _override(cfg, "planner", "m", args.m)
    _override(cfg, "planner", "delta", args.delta)
    _override(cfg, "observation", "mode", args.obs)
    if args.seed is not None:
        cfg["seed"] = args.seed
    params, sched = _load_model(args.ckpt, cfg)
    cfg["data"]["n"] = params.N
    typed = build_configs(cfg)
    scene = parse_scene(args.scene, typed["guidance"])
    pcfg = replace(typed["planner"], controller_kind=kind)
    rec = run_episode(scene, NoiseModel(params), sched, typed["guidance"], pcfg, typed["observation"],
                      seed=cfg["seed"], record_plans=bool(args.dump_plans or args.plot))
    print(f"outcome {Outcome(rec.outcome).value}")
    print(f"model evaluations {rec.model_eval_count}")
    print(f"refinements {rec.refine_count}")
    print(f"path length {rec.path_length:.4f}")
    if args.dump_plans:
        dump_plans(rec.snapshots, args.dump_plans)
        print(f"wrote {len(rec.snapshots)} plan snapshots to {args.dump_plans}")
    if args.plot:
        emit_plots(Path(args.plot).parent, episodes=[(Path(args.plot).stem.removeprefix("episode_"), scene, rec)])
    return EXIT_CODES[Outcome(rec.outcome)]


def _episode_budget(section: dict, quick: bool) -> tuple[int, int]:
    if quick:
        return quick_layout(section["n_poses"])
    return section["n_scenes"], section["n_poses"]


def cmd_bench(args, cfg) -> int:
    params, sched = _load_model(args.ckpt, cfg)
    cfg["data"]["n"] = params.N
    typed = build_configs(cfg)
    b = cfg["bench"]
    n_scenes, n_poses = _episode_budget(b, args.quick)
    out_dir = Path(args.out_dir) if args.out_dir else output_root() / "bench"
    echo_config(cfg, out_dir)
    checks, rows, overlays = [], [], []
    obs_base = typed["observation"]
    for mode in b["obs_modes"]:
        obs = replace(obs_base, mode=mode)
        res = run_benchmark(b["difficulty"], mode, b["controllers"], n_scenes, n_poses, params, sched,
                            typed["guidance"], typed["planner"], obs, root_seed=cfg["seed"], jobs=args.jobs,
                            timing=b["timing"], log_path=out_dir / "episodes.csv")
        rows += res.rows()
        for k, s in res.summaries.items():
            print(f"{res.difficulty}/{mode} {k:<11} sr={float(s.sr):.2f} cr={float(s.cr):.2f} "
                  f"ncr={float(s.ncr):.2f} evals={s.mean_model_evals:.1f} refine_hz={s.mean_refine_hz:.1f}")
        kinds = set(res.records)
        if {"cape", "mpd_refine", "mpd"} <= kinds:
            checks.append(check_ordering(res) if mode == "full" else check_gap(res))
        if {"cape", "mpd_refine"} <= kinds:
            checks.append(check_refine_economy(res, typed["planner"].prior_noise_level, sched.T))
        overlays += _overlay_episodes(res, params, sched, typed, obs)
    write_rows(rows, out_dir / "bench.csv")
    emit_plots(out_dir / "plots", episodes=overlays)
    _finish(checks, out_dir)
    return 0


def _overlay_episodes(res, params, sched, typed, obs):
    """Re-run the first paired episode per controller with plan recording on."""
    spec = res.specs[0]
    scene = with_random_start(generate_scene(spec.difficulty, spec.scene_seed, gcfg=typed["guidance"]), spec.pose,
                              gcfg=typed["guidance"])
    out = []
    for kind in res.records:
        pcfg = replace(typed["planner"], controller_kind=kind)
        rec = run_episode(scene, NoiseModel(params), sched, typed["guidance"], pcfg, obs, seed=spec.episode_seed,
                          record_plans=True)
        out.append((f"{res.obs_mode}_{kind}", scene, rec))
    return out


def _finish(checks, out_dir: Path):
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    path = write_verdict(checks, out_dir / "verdict.json")
    print(f"wrote {path}")


STUDY_CHECKS = {"lambda": check_lambda_robustness, "prefix_noise": check_prefix_noise,
                "start_step": check_start_step}


def cmd_sweep(args, cfg) -> int:
    params, sched = _load_model(args.ckpt, cfg)
    cfg["data"]["n"] = params.N
    typed = build_configs(cfg)
    sw = cfg["sweep"]
    n_scenes, n_poses = _episode_budget(sw, args.quick)
    studies = sw["studies"]
    if args.study:
        missing = [s for s in args.study if s not in studies]
        if missing:
            raise UsageError(f"unknown study {missing[0]!r}; configured: {sorted(studies)}")
        studies = {k: studies[k] for k in args.study}
    out_dir = Path(args.out_dir) if args.out_dir else output_root() / "sweep"
    echo_config(cfg, out_dir)
    checks = []
    for name, study in studies.items():
        spec = SweepSpec(grid=study["grid"], scenes=list(range(n_scenes)), poses=n_poses,
                         controllers=study.get("controllers", ["cape"]), difficulty=sw["difficulty"],
                         obs_mode=study.get("obs_mode", "full"), root_seed=cfg["seed"],
                         base_guidance=typed["guidance"], base_planner=typed["planner"])
        rows = run_sweep(spec, params, sched, out_csv=out_dir / f"{name}.csv", jobs=args.jobs, timing=sw["timing"])
        emit_plots(out_dir / "plots" / name, rows=rows, params=spec.params)
        for r in rows:
            vals = " ".join(f"{p}={r[p]}" for p in spec.params)
            print(f"{name} {r['controller']:<11} {vals} sr={float(r['sr']):.2f}")
        check = STUDY_CHECKS.get(name)
        if check is not None:
            try:
                checks.append(check(rows))
            except (KeyError, UsageError) as exc:
                log.warning("study %s does not fit its check: %s", name, exc)
    _finish(checks, out_dir)
    return 0


# ---- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Reports bad arguments as usage errors (exit 1) so 2 and 3 stay reserved for episode outcomes."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cape", description=__doc__)
    p.add_argument("--config", help="YAML config file; flags override its values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate RRT demonstrations")
    g.add_argument("--out")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--augment", type=int, help="extra random-start suffixes per trajectory")
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train the noise predictor")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--quick", action="store_true", help="short training run")
    t.add_argument("--force", action="store_true")

    pl = sub.add_parser("plan", help="run one closed-loop episode")
    pl.add_argument("--ckpt")
    pl.add_argument("--scene", required=True, help="scene file or difficulty:seed[:pose]")
    pl.add_argument("--controller", default="cape")
    pl.add_argument("--lambda", dest="strength", type=float)
    pl.add_argument("--m", type=int)
    pl.add_argument("--delta", type=int)
    pl.add_argument("--chi", type=int)
    pl.add_argument("--obs", choices=["full", "limited"])
    pl.add_argument("--seed", type=int)
    pl.add_argument("--dump-plans", help="write per-iteration plans as JSON lines")
    pl.add_argument("--plot", help="write an SVG overlay of the episode")

    for name, help_ in (("bench", "paired controller benchmark"), ("sweep", "parameter sweeps")):
        b = sub.add_parser(name, help=help_)
        b.add_argument("--ckpt")
        b.add_argument("--out-dir")
        b.add_argument("--quick", action="store_true", help="20 episodes per cell")
        b.add_argument("--jobs", type=int, default=1)
        if name == "sweep":
            b.add_argument("--study", action="append", help="run only this configured study (repeatable)")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "plan": cmd_plan, "bench": cmd_bench, "sweep": cmd_sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return COMMANDS[args.command](args, cfg)
    except CapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
