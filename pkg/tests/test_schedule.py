import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cape.errors import ConfigError, StructuralError, UsageError
from cape.schedule import DiffusionSchedule, Trajectory, forward_noise, make_schedule, reverse_mean


def _with_tables(sched, t, alpha, alpha_bar):
    """Copy of ``sched`` with level t overwritten, for closed-form cases."""
    tables = {k: getattr(sched, k).copy() for k in ("beta", "alpha", "alpha_bar", "sigma")}
    tables["alpha"][t] = alpha
    tables["beta"][t] = 1.0 - alpha
    tables["alpha_bar"][t] = alpha_bar
    return DiffusionSchedule(T=sched.T, **tables)


def test_default_schedule_tables():
    s = make_schedule()
    assert s.T == 25
    assert len(s.beta) == len(s.alpha) == len(s.alpha_bar) == len(s.sigma) == 26
    b = s.beta[1:]
    assert b[0] == pytest.approx(1e-4, rel=1e-12) and b[-1] == pytest.approx(0.8, rel=1e-12)
    ratios = b[1:] / b[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-10)
    assert np.all(np.diff(b) >= 0) and 0 < b[0] and b[-1] < 1
    # recompute the product chain directly
    prod = 1.0
    for t in range(1, 26):
        prod *= 1.0 - b[t - 1]
        assert s.alpha_bar[t] == pytest.approx(prod, rel=1e-12)
    assert np.all(np.diff(s.alpha_bar[1:]) < 0)
    assert s.alpha_bar[25] < 0.05


def test_small_beta_max_leaves_signal_at_T():
    # with 25 geometric steps ending at 0.2 over half the signal variance survives,
    # which is why the default endpoint is larger
    s = make_schedule(25, 1e-4, 0.2)
    assert math.prod(1 - s.beta[1:]) == pytest.approx(s.alpha_bar[25], rel=1e-12)
    assert s.alpha_bar[25] > 0.4
    assert np.all(np.diff(s.alpha_bar[1:]) < 0)


def test_sigma_is_posterior_std():
    s = make_schedule()
    assert s.sigma[1] == 0.0
    for t in range(2, 26):
        want = s.beta[t] * (1 - s.alpha_bar[t - 1]) / (1 - s.alpha_bar[t])
        assert s.sigma[t] ** 2 == pytest.approx(want, rel=1e-12)


def test_two_step_nearly_constant():
    s = make_schedule(2, 0.1 - 1e-9, 0.1)
    assert s.sigma[1] == 0.0
    assert s.beta[2] - s.beta[1] < 1e-8


@pytest.mark.parametrize("T,lo,hi", [(25, 0.2, 0.1), (25, 0.1, 0.1), (1, 1e-4, 0.2), (25, 0.0, 0.2), (25, 1e-4, 1.0)])
def test_bad_schedules_rejected(T, lo, hi):
    with pytest.raises(ConfigError):
        make_schedule(T, lo, hi)


def test_forward_noise_cases():
    s = make_schedule()
    rng = np.random.default_rng(0)
    tau = Trajectory(rng.normal(size=(32, 2)))
    for t in (1, 7, 25):
        out = forward_noise(tau, t, np.zeros((32, 2)), s)
        assert out.noise_level == t
        np.testing.assert_array_equal(out.waypoints, np.sqrt(s.alpha_bar[t]) * tau.waypoints)
    one = _with_tables(s, 3, 1.0, 1.0)
    np.testing.assert_allclose(forward_noise(tau, 3, rng.normal(size=(32, 2)), one).waypoints, tau.waypoints,
                               atol=1e-15)
    s36 = _with_tables(s, 4, 0.9, 0.36)
    out = forward_noise(Trajectory(np.zeros((5, 2))), 4, np.ones((5, 2)), s36)
    np.testing.assert_allclose(out.waypoints, 0.8, atol=1e-12)


def test_forward_noise_errors():
    s = make_schedule()
    tau = Trajectory(np.zeros((4, 2)))
    with pytest.raises(UsageError):
        forward_noise(tau, 0, np.zeros((4, 2)), s)
    with pytest.raises(UsageError):
        forward_noise(tau, 26, np.zeros((4, 2)), s)
    with pytest.raises(StructuralError):
        forward_noise(tau, 3, np.zeros((3, 2)), s)


def test_reverse_mean_cases():
    s = make_schedule()
    x = np.random.default_rng(1).normal(size=(6, 2))
    ident = _with_tables(s, 2, 1.0, 0.5)
    np.testing.assert_array_equal(reverse_mean(x, 2, np.zeros_like(x), ident), x)
    case = _with_tables(s, 5, 0.99, 0.9)
    got = reverse_mean(np.zeros((6, 2)), 5, np.ones((6, 2)), case)
    want = -(0.01 / math.sqrt(0.1)) / math.sqrt(0.99)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)
    with pytest.raises(StructuralError):
        reverse_mean(x, 3, np.zeros((5, 2)), s)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), N=st.integers(2, 40), d=st.integers(1, 3))
def test_one_step_round_trip(seed, N, d):
    s = make_schedule()
    rng = np.random.default_rng(seed)
    tau0 = rng.normal(size=(N, d))
    eps = rng.normal(size=(N, d))
    xt = forward_noise(Trajectory(tau0), 1, eps, s)
    np.testing.assert_allclose(reverse_mean(xt, 1, eps, s), tau0, atol=1e-10)


def test_marginal_mean_converges():
    s = make_schedule()
    rng = np.random.default_rng(5)
    tau0 = Trajectory(rng.normal(size=(3, 2)))
    t = 10
    draws = np.stack([forward_noise(tau0, t, rng.standard_normal((3, 2)), s).waypoints for _ in range(20_000)])
    se = np.sqrt(1 - s.alpha_bar[t]) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - np.sqrt(s.alpha_bar[t]) * tau0.waypoints) < 3 * se + 1e-12)


def test_trajectory_validation():
    with pytest.raises(StructuralError):
        Trajectory(np.zeros(4))
    with pytest.raises(StructuralError):
        Trajectory(np.array([[0.0, np.nan]]))
