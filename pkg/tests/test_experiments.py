import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cape.errors import ConfigError, UsageError
from cape.experiments import (
    EPISODE_COLUMNS,
    MetricsSummary,
    SweepSpec,
    aggregate,
    canonical_param,
    check_gap,
    check_lambda_robustness,
    check_prefix_noise,
    check_start_step,
    emit_plots,
    episode_specs,
    paired_sign_test,
    quick_layout,
    read_rows,
    refine_hz,
    run_benchmark,
    run_episodes,
    run_sweep,
    write_verdict,
    Check,
)
from cape.guidance import GuidanceConfig
from cape.planner import PlannerConfig
from cape.world import EpisodeRecord, Outcome, generate_scene, run_episode, with_random_start


def _rec(outcome, evals=25, refines=0, refine_time=0.0):
    return EpisodeRecord(Outcome(outcome), np.zeros((1, 2)), evals, refines, 1.0, refine_time)


def test_rates_from_counts():
    recs = [_rec("success")] * 94 + [_rec("collision")] * 2 + [_rec("non_completion")] * 4
    s = aggregate(recs)
    assert (s.sr, s.cr, s.ncr) == (Fraction(94, 100), Fraction(2, 100), Fraction(4, 100))
    assert float(s.sr) == 0.94 and float(s.cr) == 0.02 and float(s.ncr) == 0.04


@settings(max_examples=300, deadline=None)
@given(a=st.integers(0, 10_000), b=st.integers(0, 10_000), c=st.integers(0, 10_000))
def test_rates_partition_unity(a, b, c):
    if a + b + c == 0:
        with pytest.raises(UsageError):
            MetricsSummary(a, b, c)
        return
    s = MetricsSummary(a, b, c)
    assert s.sr + s.cr + s.ncr == 1
    assert all(0 <= r <= 1 for r in (s.sr, s.cr, s.ncr))


def test_aggregate_rejects_empty_and_negative():
    with pytest.raises(UsageError):
        aggregate([])
    with pytest.raises(UsageError):
        MetricsSummary(-1, 2, 0)


def test_refine_rate_and_eval_means():
    recs = [_rec("success", 29, 2, 0.5), _rec("collision", 25, 0, 0.0), _rec("success", 33, 4, 2.0)]
    assert refine_hz(recs[0]) == 4.0 and refine_hz(recs[1]) is None
    s = aggregate(recs)
    assert s.mean_refine_hz == 3.0
    assert s.mean_model_evals == pytest.approx(29.0)


def test_episode_specs_are_shared_and_distinct():
    a = episode_specs("medium", "full", range(4), 5, root_seed=0)
    b = episode_specs("medium", "full", range(4), 5, root_seed=0)
    assert a == b and len(a) == 20
    assert len({s.episode_seed for s in a}) == 20
    assert episode_specs("medium", "full", range(4), 5, root_seed=1) != a
    assert quick_layout(5) == (4, 5)


def test_paired_episodes_see_identical_conditions(model, sched):
    """Controllers differ only in the planner: same scene, start, and planner stream seed."""
    res = run_benchmark("easy", "full", ["mpd", "cape"], 2, 1, model, sched, timing="model")
    assert [len(v) for v in res.records.values()] == [2, 2]
    for spec, r_mpd, r_cape in zip(res.specs, res.records["mpd"], res.records["cape"]):
        scene = with_random_start(generate_scene(spec.difficulty, spec.scene_seed), spec.pose)
        assert np.array_equal(r_mpd.executed_path[0], scene.start)
        assert np.array_equal(r_cape.executed_path[0], scene.start)
        again = run_episode(scene, model, sched, GuidanceConfig(), PlannerConfig(controller_kind="cape"),
                            seed=spec.episode_seed)
        assert np.array_equal(again.executed_path, r_cape.executed_path)


def test_benchmark_log_resumes(model, sched, tmp_path):
    log_path = tmp_path / "episodes.csv"
    first = run_benchmark("easy", "full", ["cape"], 2, 1, model, sched, timing="model", log_path=log_path)
    text = log_path.read_text()
    assert text.splitlines()[0] == ",".join(EPISODE_COLUMNS)
    assert len(text.splitlines()) == 3
    # a second run reads everything back without re-running
    again = run_benchmark("easy", "full", ["cape"], 2, 1, model, sched, timing="model", log_path=log_path)
    assert log_path.read_text() == text
    assert [r.outcome for r in again.records["cape"]] == [r.outcome for r in first.records["cape"]]


def test_single_cell_counts_every_episode(model, sched):
    spec = SweepSpec(grid={"lambda": [0.2]}, scenes=[0, 1], poses=2, controllers=["cape"], difficulty="easy",
                     obs_mode="full")
    rows = run_sweep(spec, model, sched, timing="model")
    assert len(rows) == 1 and rows[0]["n"] == "4"
    assert rows[0]["strength"] == "0.2"
    direct = run_episodes(episode_specs("easy", "full", [0, 1], 2), model, sched, GuidanceConfig(),
                          PlannerConfig(), timing="model")
    assert float(rows[0]["sr"]) == float(aggregate(direct).sr)


def test_sweep_spec_validation():
    with pytest.raises(ConfigError):
        SweepSpec(grid={"lambda": [0.1, 0.1]}, scenes=[0], controllers=["cape"])
    with pytest.raises(ConfigError):
        SweepSpec(grid={}, scenes=[0], controllers=["cape"])
    with pytest.raises(ConfigError):
        SweepSpec(grid={"lambda": [0.1]}, scenes=[0, 0], controllers=["cape"])
    with pytest.raises(ConfigError):
        SweepSpec(grid={"lambda": [0.1], "strength": [0.2]}, scenes=[0], controllers=["cape"])
    with pytest.raises(ConfigError):
        canonical_param("lamda")
    spec = SweepSpec(grid={"m": [2, 10], "delta": [2, 10]}, scenes=[0], controllers=["cape"])
    assert spec.params == ["prefix_length", "prior_noise_level"] and len(spec.cell_values()) == 4
    g, p = spec.configs_for({"prefix_length": 10, "prior_noise_level": 2})
    assert (p.prefix_length, p.prior_noise_level, g.strength) == (10, 2, GuidanceConfig().strength)


def test_interrupted_sweep_resumes_byte_identical(model, sched, tmp_path):
    spec = SweepSpec(grid={"lambda": [0.1, 0.5]}, scenes=[0, 1], poses=1, controllers=["cape", "mpd"],
                     difficulty="easy", obs_mode="full")
    ref = tmp_path / "ref.csv"
    run_sweep(spec, model, sched, out_csv=ref, timing="model")
    full = ref.read_text()
    lines = full.splitlines(keepends=True)
    assert len(lines) == 5
    # crash after two cells, mid-way through writing the third
    out = tmp_path / "resume.csv"
    out.write_text("".join(lines[:3]) + lines[3][: len(lines[3]) // 2])
    rows = run_sweep(spec, model, sched, out_csv=out, timing="model")
    assert out.read_bytes() == ref.read_bytes()
    assert rows == read_rows(ref)


def test_mismatched_csv_header_is_rejected(model, sched, tmp_path):
    out = tmp_path / "x.csv"
    out.write_text("controller,wrong\n")
    spec = SweepSpec(grid={"lambda": [0.1]}, scenes=[0], poses=1, controllers=["cape"], difficulty="empty")
    with pytest.raises(ConfigError):
        run_sweep(spec, model, sched, out_csv=out, timing="model")


def test_sign_test_against_binomial_tail():
    from math import comb

    better = np.array([1] * 12 + [0] * 3 + [1] * 5 + [0] * 5, dtype=bool)
    worse = np.array([0] * 12 + [1] * 3 + [1] * 5 + [0] * 5, dtype=bool)
    p, wins, losses = paired_sign_test(better, worse)
    assert (wins, losses) == (12, 3)
    tail = sum(comb(15, k) for k in range(12, 16)) / 2**15
    assert p == pytest.approx(tail, rel=1e-12)
    assert paired_sign_test(better, better)[0] == 1.0
    with pytest.raises(UsageError):
        paired_sign_test(better, worse[:-1])


def _rows(controller, key, pairs):
    return [{"controller": controller, key: str(v), "sr": str(s)} for v, s in pairs]


def test_study_checks():
    lam = _rows("cape", "strength", [(0.1, 0.5), (1.0, 0.55)]) + _rows("mpd_refine", "strength",
                                                                       [(0.1, 0.3), (1.0, 0.6)])
    assert check_lambda_robustness(lam).passed
    assert not check_lambda_robustness(_rows("cape", "strength", [(0.1, 0.1), (1, 0.9)])
                                       + _rows("mpd_refine", "strength", [(0.1, 0.5), (1, 0.5)])).passed
    pn = [{"controller": "cape", "prefix_length": m, "prior_noise_level": d, "sr": s}
          for m, d, s in [("2", "2", "0.5"), ("10", "10", "0.4"), ("2", "10", "0.1"), ("10", "2", "0.9")]]
    assert check_prefix_noise(pn).passed
    peaked = _rows("cape", "start_step", [(2, 0.3), (4, 0.6), (9, 0.2)])
    assert check_start_step(peaked).passed
    assert not check_start_step(_rows("cape", "start_step", [(2, 0.7), (5, 0.3), (9, 0.2)])).passed
    assert check_start_step(_rows("cape", "start_step", [(2, 0.42), (5, 0.40), (9, 0.41)])).passed


def test_gap_check_threshold():
    class Bench:
        difficulty, obs_mode = "medium", "limited"
        summaries = {"cape": MetricsSummary(45, 55, 0), "mpd": MetricsSummary(30, 70, 0)}

    assert check_gap(Bench()).passed
    Bench.summaries = {"cape": MetricsSummary(44, 56, 0), "mpd": MetricsSummary(30, 70, 0)}
    assert not check_gap(Bench()).passed


def test_verdict_file(tmp_path):
    path = write_verdict([Check("a", True, "x"), Check("b", False, "y")], tmp_path / "verdict.json")
    doc = json.loads(path.read_text())
    assert doc["all_passed"] is False and [c["name"] for c in doc["checks"]] == ["a", "b"]


def test_plots_are_deterministic_and_complete(model, sched, tmp_path):
    rows = [{"controller": k, "strength": str(v), "start_step": "5", "sr": str(s)}
            for k, v, s in [("cape", 0.1, 0.4), ("cape", 0.5, 0.5), ("mpd_refine", 0.1, 0.3),
                            ("mpd_refine", 0.5, 0.45)]]
    a = emit_plots(tmp_path / "a", rows=rows, params=["strength", "start_step"])
    b = emit_plots(tmp_path / "b", rows=rows, params=["strength", "start_step"])
    assert sorted(p.name for p in a) == ["sr_vs_start_step.svg", "sr_vs_strength.svg"]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))

    scene = with_random_start(generate_scene("medium", 3), 0)
    rec = run_episode(scene, model, sched, GuidanceConfig(), PlannerConfig(), seed=1, record_plans=True)
    (svg,) = emit_plots(tmp_path / "ep", episodes=[("demo", scene, rec)])
    text = svg.read_text()
    assert svg.name == "episode_demo.svg"
    assert text.count("<path") >= len(scene.obstacles) + 2
    assert "goal" in text and "executed" in text
    with pytest.raises(UsageError):
        emit_plots(tmp_path / "none")
