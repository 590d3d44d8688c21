import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cape.datagen import generate_dataset
from cape.denoiser import (
    TaskContext,
    TrainingConfig,
    init_params,
    load_checkpoint,
    loss_and_gradient,
    loss_and_gradient_fixed,
    predict_noise,
    predict_noise_batch,
    save_checkpoint,
    train,
)
from cape.errors import ConfigError, LoadError, StructuralError, UsageError
from cape.schedule import Trajectory, make_schedule


def oracle_forward(p, x, t, start, goal):
    """Straight-line re-implementation of the network for one trajectory (normalized coords)."""
    lo, hi = p.lo, p.hi
    half = (hi - lo) / 2
    N, d = p.N, p.d
    ab = p.alpha_bar[t]
    curv = np.zeros((N, d))
    for i in range(1, N - 1):
        curv[i] = (x[i - 1] - 2 * x[i] + x[i + 1]) / np.sqrt(6 * (1 - ab))
    k = np.arange(1, p.time_dim // 2 + 1)
    ang = t * np.pi * k / (2 * p.T)
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    feats = np.concatenate([x.ravel(), curv.ravel(), emb, (start - lo) / half - 1, (goal - lo) / half - 1])
    W = p.tensors

    def silu(z):
        return z / (1 + np.exp(-z))

    h = feats @ W["W_in"] + W["b_in"]
    for b in range(p.depth):
        h = h + silu(h) @ W[f"W_{b}"] + W[f"b_{b}"]
    out = (silu(h) @ W["W_out"] + W["b_out"]).reshape(N, d)
    if p.preconditioning == "linear_gaussian":
        dist = np.linalg.norm(goal - start)
        kk = N - 1 if p.resolution is None else int(np.clip(np.ceil(dist / p.resolution), 1, N - 1))
        line = np.array([start + min(i / kk, 1.0) * (goal - start) for i in range(N)])
        line[-1] = goal
        line_u = (line - lo) / half - 1
        A = ab * p.path_cov + (1 - ab) * np.eye(N)
        out = out + np.sqrt(1 - ab) * np.linalg.solve(A, x - np.sqrt(ab) * line_u)
    return out


def test_zero_params_give_zero_output():
    p = init_params(8, 2, 25, [0, 0], [1, 1], hidden=16, depth=2, time_dim=8, preconditioning="none")
    p.flat[:] = 0.0
    x = np.random.default_rng(0).normal(size=(8, 2))
    out = predict_noise(p, x, 5, TaskContext([0.1, 0.2], [0.8, 0.9]))
    assert np.array_equal(out, np.zeros((8, 2)))


@pytest.mark.parametrize("precond,resolution", [("none", None), ("linear_gaussian", None),
                                                ("linear_gaussian", 0.1)])
def test_forward_matches_oracle(tiny_params, precond, resolution):
    rng = np.random.default_rng(2)
    D = rng.normal(size=(4, 6)) * 0.1
    D[[0, -1]] = 0.0
    p = init_params(4, 2, 25, [0, 0], [1, 1], hidden=8, depth=2, time_dim=4, preconditioning=precond,
                    path_cov=D @ D.T, resolution=resolution)
    p.flat[:] = tiny_params.flat
    for t in (1, 9, 25):
        x = rng.normal(size=(4, 2))
        s, g = rng.uniform(0, 1, 2), rng.uniform(0, 1, 2)
        got = predict_noise(p, x, t, TaskContext(s, g))
        np.testing.assert_allclose(got, oracle_forward(p, x, t, s, g), rtol=1e-12, atol=1e-12)


def test_prediction_deterministic(tiny_params):
    x = np.random.default_rng(4).normal(size=(4, 2))
    ctx = TaskContext([0.2, 0.3], [0.7, 0.1])
    a = predict_noise(tiny_params, Trajectory(x, 3), 3, ctx)
    b = predict_noise(tiny_params, x.copy(), 3, ctx)
    assert np.array_equal(a, b)


def test_prediction_shape_errors(tiny_params):
    ctx = TaskContext([0.2, 0.3], [0.7, 0.1])
    with pytest.raises(StructuralError):
        predict_noise(tiny_params, np.zeros((5, 2)), 3, ctx)
    with pytest.raises(StructuralError):
        predict_noise(tiny_params, np.zeros((4, 2)), 3, TaskContext([0.1, 0.2, 0.3], [0.0, 0.0, 0.0]))
    with pytest.raises(StructuralError):
        predict_noise_batch(tiny_params, np.zeros((4, 2)), 3, [0, 0], [1, 1])
    with pytest.raises(UsageError):
        predict_noise(tiny_params, np.zeros((4, 2)), 0, ctx)


def _batch(rng, B=3, N=4, d=2):
    return rng.uniform(-1, 1, size=(B, N, d)), rng.uniform(0, 1, (B, d)), rng.uniform(0, 1, (B, d))


def test_gradient_matches_finite_differences(tiny_params):
    assert tiny_params.size <= 2000
    sched = make_schedule()
    rng = np.random.default_rng(7)
    x0, s, g = _batch(rng)
    t = np.array([1, 12, 25])
    eps = rng.standard_normal(x0.shape)
    _, grad = loss_and_gradient_fixed(tiny_params, x0, s, g, t, eps, sched)
    h = 1e-5
    fd = np.empty_like(grad)
    for i in range(tiny_params.size):
        keep = tiny_params.flat[i]
        tiny_params.flat[i] = keep + h
        lp, _ = loss_and_gradient_fixed(tiny_params, x0, s, g, t, eps, sched)
        tiny_params.flat[i] = keep - h
        lm, _ = loss_and_gradient_fixed(tiny_params, x0, s, g, t, eps, sched)
        tiny_params.flat[i] = keep
        fd[i] = (lp - lm) / (2 * h)
    rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-6)
    assert rel.max() < 1e-4


def test_perfect_predictor_has_zero_loss_and_gradient():
    sched = make_schedule()
    p = init_params(4, 2, 25, [0, 0], [1, 1], hidden=8, depth=1, time_dim=4, preconditioning="none")
    rng = np.random.default_rng(0)
    x0, s, g = _batch(rng, B=1)
    eps = rng.standard_normal(x0.shape)
    p.tensors["b_out"][...] = eps.ravel()
    loss, grad = loss_and_gradient_fixed(p, x0, s, g, np.array([6]), eps, sched)
    assert loss == 0.0
    assert not np.any(grad)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_loss_non_negative(seed):
    sched = make_schedule()
    p = init_params(4, 2, 25, [0, 0], [1, 1], hidden=8, depth=1, time_dim=4, seed=seed, zero_output=False)
    loss, _ = loss_and_gradient(p, _batch(np.random.default_rng(seed)), sched, seed)
    assert loss >= 0.0


def test_empty_batch_rejected(tiny_params):
    with pytest.raises(UsageError):
        loss_and_gradient(tiny_params, (np.zeros((0, 4, 2)), np.zeros((0, 2)), np.zeros((0, 2))), make_schedule(), 0)


def test_loss_invariant_to_batch_order(tiny_params):
    sched = make_schedule()
    rng = np.random.default_rng(9)
    x0, s, g = _batch(rng, B=5)
    t = rng.integers(1, 26, 5)
    eps = rng.standard_normal(x0.shape)
    perm = np.array([3, 0, 4, 1, 2])
    la, ga = loss_and_gradient_fixed(tiny_params, x0, s, g, t, eps, sched)
    lb, gb = loss_and_gradient_fixed(tiny_params, x0[perm], s[perm], g[perm], t[perm], eps[perm], sched)
    assert la == pytest.approx(lb, rel=1e-12)
    np.testing.assert_allclose(ga, gb, rtol=1e-9, atol=1e-12)
    # a single item's gradient differs from the batch gradient
    _, g1 = loss_and_gradient_fixed(tiny_params, x0[:1], s[:1], g[:1], t[:1], eps[:1], sched)
    assert not np.allclose(g1, ga)


def test_training_halves_raw_network_loss(default_dataset, sched):
    # without the analytic skip the zero-initialized network starts at loss 1
    res = train(default_dataset, TrainingConfig(), sched, preconditioning="none")
    assert res.initial_loss == pytest.approx(1.0, abs=0.02)
    assert res.final_loss < 0.5 * res.initial_loss
    assert len(res.epoch_losses) == 80


def test_default_training_improves_on_skip(trained):
    # the skip alone already sits far below where the raw network ends up
    assert trained.final_loss < trained.initial_loss < 0.2
    assert np.all(np.isfinite(trained.params.flat))


def test_skip_is_gaussian_posterior_noise():
    """For data drawn exactly from the assumed Gaussian, the skip is the MMSE noise estimate."""
    sched = make_schedule()
    N = 6
    rng = np.random.default_rng(0)
    D = rng.normal(size=(N, N)) * 0.05
    D[[0, -1]] = 0.0
    cov = D @ D.T
    p = init_params(N, 1, 25, [0.0], [2.0], hidden=4, depth=1, time_dim=4, path_cov=cov)
    s, g = np.array([0.0]), np.array([2.0])
    line = np.linspace(-1, 1, N)[:, None]
    M, t = 20_000, 8
    x0 = line[None] + np.einsum("ij,mjd->mid", D, rng.standard_normal((M, N, 1)))
    eps = rng.standard_normal((M, N, 1))
    ab = sched.alpha_bar[t]
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    skip = predict_noise_batch(p, xt, t, s, g)
    mse_skip = np.mean((skip - eps) ** 2)
    # any other linear gain does worse, e.g. a slightly rescaled one
    assert mse_skip < np.mean((1.05 * skip - eps) ** 2)
    assert mse_skip < np.mean((0.95 * skip - eps) ** 2)
    # closed-form MMSE: sqrt(1-ab)^2 * trace((1-ab)^-1 ... ) via the posterior covariance
    A = ab * cov + (1 - ab) * np.eye(N)
    want = 1 - (1 - ab) * np.trace(np.linalg.inv(A)) / N
    assert mse_skip == pytest.approx(want, abs=0.01)


def test_context_is_live_input(model):
    x = np.random.default_rng(0).normal(size=(model.N, model.d))
    a = predict_noise(model, x, 10, TaskContext([0.1, 0.1], [0.9, 0.9]))
    b = predict_noise(model, x, 10, TaskContext([0.1, 0.1], [0.9, 0.2]))
    assert np.mean(np.abs(a - b)) > 0


def test_training_reproducible_and_validated():
    sched = make_schedule()
    ds = generate_dataset(count=20, N=8, seed=3)
    cfg = TrainingConfig(epochs=2, batch_size=8, seed=5)
    a = train(ds, cfg, sched, hidden=16, depth=1, time_dim=4)
    b = train(ds, cfg, sched, hidden=16, depth=1, time_dim=4)
    assert np.array_equal(a.params.flat, b.params.flat)
    c = train(ds, TrainingConfig(epochs=2, batch_size=8, seed=6), sched, hidden=16, depth=1, time_dim=4)
    assert not np.array_equal(a.params.flat, c.params.flat)
    with pytest.raises(ConfigError):
        TrainingConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainingConfig(learning_rate=0.0)
    bad = generate_dataset(count=2, N=8, seed=3)
    bad.trajectories[1] = Trajectory(np.zeros((9, 2)))
    with pytest.raises(StructuralError):
        train(bad, cfg, sched, hidden=16, depth=1, time_dim=4)


def test_training_config_defaults():
    cfg = TrainingConfig()
    assert (cfg.learning_rate, cfg.epochs, cfg.batch_size) == (1e-4, 80, 256)


def test_checkpoint_round_trip(tmp_path, tiny_params):
    path = save_checkpoint(tiny_params, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert np.array_equal(back.flat, tiny_params.flat)
    assert back.header() == tiny_params.header()
    assert save_checkpoint(back, tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_validation(tmp_path, tiny_params):
    path = save_checkpoint(tiny_params, tmp_path / "m.ckpt")
    with pytest.raises(LoadError) as err:
        load_checkpoint(path, N=32)
    assert err.value.field == "N" and "N" in str(err.value)
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-8])
    with pytest.raises(LoadError) as err:
        load_checkpoint(tmp_path / "cut.ckpt")
    assert err.value.field == "payload"
    (tmp_path / "bad.ckpt").write_bytes(b"nope" + raw)
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "bad.ckpt")
    lied = raw.replace(b'"N": 4', b'"N": 5', 1)
    (tmp_path / "lied.ckpt").write_bytes(lied)
    with pytest.raises(LoadError) as err:
        load_checkpoint(tmp_path / "lied.ckpt")
    assert err.value.field in ("n_params", "N")


def test_bad_preconditioning_rejected():
    with pytest.raises(ConfigError):
        init_params(4, 2, 25, [0, 0], [1, 1], hidden=8, depth=1, time_dim=4, preconditioning="magic")
    with pytest.raises(StructuralError):
        init_params(4, 2, 25, [0, 0], [1, 1], hidden=8, depth=1, time_dim=4, path_cov=np.eye(3))
    with pytest.raises(StructuralError):
        init_params(4, 2, 25, [0, 0], [1, 1], hidden=8, depth=1, time_dim=4, path_cov=np.triu(np.ones((4, 4))))
