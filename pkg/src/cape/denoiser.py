"""Noise predictor eps_theta(tau_t, t, O): residual MLP with manual backprop.

The diffusion state lives in normalized coordinates (workspace bounds mapped
to [-1, 1]); task contexts are given in world coordinates and normalized here.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cape.errors import ConfigError, LoadError, StructuralError, UsageError
from cape.polyline import straight_paths
from cape.schedule import DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DiffusionSchedule, Trajectory, make_schedule

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CAPE-CKPT\n"
# per-waypoint variance of the default (uncorrelated) deviation prior
DEFAULT_PATH_VAR = 0.01
CHECKPOINT_VERSION = 1


@dataclass
class TaskContext:
    start: np.ndarray
    goal: np.ndarray
    # carried for completeness, the default network does not read it
    history: np.ndarray | None = None

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        if self.start.shape != self.goal.shape or self.start.ndim != 1:
            raise StructuralError("start and goal must be vectors of equal length")
        if not (np.all(np.isfinite(self.start)) and np.all(np.isfinite(self.goal))):
            raise StructuralError("context contains non-finite values")
        if self.history is not None:
            self.history = np.asarray(self.history, dtype=float)


@dataclass(frozen=True)
class Normalizer:
    """Affine map between the workspace box and [-1, 1]^d."""

    lo: np.ndarray
    hi: np.ndarray

    @property
    def half_extent(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def to_unit(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / self.half_extent - 1.0

    def to_world(self, u):
        return (np.asarray(u, dtype=float) + 1.0) * self.half_extent + self.lo


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    epochs: int = 80
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError("epochs must be an integer >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def time_embedding(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal embedding of integer noise levels, shape (B, dim).

    Frequencies are harmonics of a half period spanning [0, T] so every
    channel varies across the short chain.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.pi * np.arange(1, half + 1) / (2.0 * T)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def curvature_feature(x, t, alpha_bar) -> np.ndarray:
    """Second difference along the trajectory scaled by the noise std at level t.

    x is (B, N, d). For smooth paths the second difference is dominated by the
    injected noise, so this channel is O(1) at every noise level.
    """
    lap = np.zeros_like(x)
    lap[:, 1:-1] = x[:, :-2] - 2.0 * x[:, 1:-1] + x[:, 2:]
    scale = 1.0 / np.sqrt(6.0 * (1.0 - alpha_bar[np.asarray(t)]))
    return lap * scale[:, None, None]


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


@dataclass
class DenoiserParams:
    """Weights of the residual network, stored as views into one flat buffer.

    Layout: input layer, ``depth`` pre-activation residual blocks, output layer.
    """

    N: int
    d: int
    T: int
    lo: np.ndarray
    hi: np.ndarray
    hidden: int = 256
    depth: int = 4
    time_dim: int = 32
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX
    preconditioning: str = "linear_gaussian"
    path_cov: np.ndarray | None = None
    resolution: float | None = None
    flat: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != (self.d,) or self.hi.shape != (self.d,):
            raise StructuralError("workspace bounds must have length d")
        if self.flat is None:
            self.flat = np.zeros(self.size)
        if self.flat.shape != (self.size,):
            raise StructuralError(f"parameter buffer has {self.flat.size} entries, architecture needs {self.size}")
        if self.preconditioning not in ("linear_gaussian", "none"):
            raise ConfigError(f"unknown preconditioning {self.preconditioning!r}")
        if self.path_cov is None:
            self.path_cov = DEFAULT_PATH_VAR * np.eye(self.N)
        self.path_cov = np.asarray(self.path_cov, dtype=float)
        if self.path_cov.shape != (self.N, self.N):
            raise StructuralError(f"path_cov must be {self.N} x {self.N}")
        if not np.allclose(self.path_cov, self.path_cov.T, rtol=0, atol=1e-12):
            raise StructuralError("path_cov must be symmetric")
        self._bind()
        self.alpha_bar = make_schedule(self.T, self.beta_min, self.beta_max).alpha_bar
        self.skip_gain = _skip_gains(self.path_cov, self.alpha_bar)

    @property
    def in_dim(self) -> int:
        return 2 * self.N * self.d + self.time_dim + 2 * self.d

    @property
    def out_dim(self) -> int:
        return self.N * self.d

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        h = self.hidden
        out = [("W_in", (self.in_dim, h)), ("b_in", (h,))]
        for k in range(self.depth):
            out += [(f"W_{k}", (h, h)), (f"b_{k}", (h,))]
        out += [("W_out", (h, self.out_dim)), ("b_out", (self.out_dim,))]
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def _bind(self):
        self.tensors = {}
        i = 0
        for name, shape in self.shapes():
            n = int(np.prod(shape))
            self.tensors[name] = self.flat[i:i + n].reshape(shape)
            i += n

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer(self.lo, self.hi)

    def header(self) -> dict:
        return {
            "N": self.N, "d": self.d, "T": self.T,
            "hidden": self.hidden, "depth": self.depth, "time_dim": self.time_dim,
            "beta_min": self.beta_min, "beta_max": self.beta_max,
            "preconditioning": self.preconditioning, "path_cov": self.path_cov.tolist(),
            "resolution": self.resolution,
            "lo": self.lo.tolist(), "hi": self.hi.tolist(),
        }

    def copy(self) -> DenoiserParams:
        return DenoiserParams(**self.header(), flat=self.flat.copy())


def init_params(N, d, T, lo, hi, hidden=256, depth=4, time_dim=32, seed=0, zero_output=True,
                beta_min=DEFAULT_BETA_MIN, beta_max=DEFAULT_BETA_MAX, preconditioning="linear_gaussian",
                path_cov=None, resolution=None) -> DenoiserParams:
    p = DenoiserParams(N=N, d=d, T=T, lo=lo, hi=hi, hidden=hidden, depth=depth, time_dim=time_dim,
                       beta_min=beta_min, beta_max=beta_max, preconditioning=preconditioning, path_cov=path_cov,
                       resolution=resolution)
    rng = np.random.default_rng(seed)
    for name, shape in p.shapes():
        if name.startswith("W"):
            if name == "W_out" and zero_output:
                continue
            p.tensors[name][...] = rng.normal(0.0, np.sqrt(1.0 / shape[0]), size=shape)
    return p


def _features(params: DenoiserParams, x_flat, t, starts, goals):
    nz = params.normalizer
    B = x_flat.shape[0]
    curv = curvature_feature(x_flat.reshape(B, params.N, params.d), t, params.alpha_bar).reshape(B, -1)
    return np.concatenate(
        [x_flat, curv, time_embedding(t, params.time_dim, params.T), nz.to_unit(starts), nz.to_unit(goals)],
        axis=1,
    )


def _skip_gains(cov, alpha_bar) -> np.ndarray:
    """Per-level matrices K_t = sqrt(1 - ab_t) (ab_t C + (1 - ab_t) I)^-1, shape (T+1, N, N)."""
    lam, U = np.linalg.eigh(cov)
    lam = np.clip(lam, 0.0, None)
    ab = alpha_bar[1:, None]
    scale = np.sqrt(1.0 - ab) / (ab * lam[None, :] + 1.0 - ab)
    gains = np.zeros((len(alpha_bar), *cov.shape))
    gains[1:] = np.einsum("ik,tk,jk->tij", U, scale, U)
    return gains


def linear_gaussian_eps(params: DenoiserParams, x, t, starts, goals) -> np.ndarray:
    """E[eps | x_t] if clean paths were the normalized start-goal segment plus
    zero-mean Gaussian deviations with covariance ``path_cov`` along the
    trajectory (shared by every coordinate).

    The gain stays bounded at every noise level; the network learns the
    residual on top of it.
    """
    nz = params.normalizer
    line = nz.to_unit(straight_paths(starts, goals, params.N, params.resolution))
    t = np.asarray(t)
    ab = params.alpha_bar[t][:, None, None]
    return np.einsum("bij,bjd->bid", params.skip_gain[t], x - np.sqrt(ab) * line)


def _predict(params: DenoiserParams, x, t, starts, goals):
    """Full prediction (B, N*d) plus what backprop needs."""
    B = x.shape[0]
    feats = _features(params, x.reshape(B, -1), t, starts, goals)
    out, cache = _forward(params, feats)
    if params.preconditioning == "linear_gaussian":
        out = out + linear_gaussian_eps(params, x, t, starts, goals).reshape(B, -1)
    return out, feats, cache


def _forward(params: DenoiserParams, feats):
    P = params.tensors
    h = feats @ P["W_in"] + P["b_in"]
    cache = []
    for k in range(params.depth):
        a, s = _silu(h)
        cache.append((h, a, s))
        h = h + a @ P[f"W_{k}"] + P[f"b_{k}"]
    a, s = _silu(h)
    cache.append((h, a, s))
    out = a @ P["W_out"] + P["b_out"]
    return out, cache


def _dsilu(h, s):
    return s * (1.0 + h * (1.0 - s))


def _backward(params: DenoiserParams, feats, cache, dout) -> np.ndarray:
    P = params.tensors
    grad = np.zeros_like(params.flat)
    G = DenoiserParams(**params.header(), flat=grad).tensors
    h, a, s = cache[-1]
    G["W_out"][...] = a.T @ dout
    G["b_out"][...] = dout.sum(axis=0)
    dh = (dout @ P["W_out"].T) * _dsilu(h, s)
    for k in reversed(range(params.depth)):
        h, a, s = cache[k]
        G[f"W_{k}"][...] = a.T @ dh
        G[f"b_{k}"][...] = dh.sum(axis=0)
        dh = dh + (dh @ P[f"W_{k}"].T) * _dsilu(h, s)
    G["W_in"][...] = feats.T @ dh
    G["b_in"][...] = dh.sum(axis=0)
    return grad


def predict_noise_batch(params: DenoiserParams, x, t, starts, goals) -> np.ndarray:
    """Batched forward pass; x is (B, N, d) in normalized coordinates."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 3 or x.shape[1:] != (params.N, params.d):
        raise StructuralError(f"expected (B, {params.N}, {params.d}) input, got {x.shape}")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    starts = np.broadcast_to(np.asarray(starts, dtype=float), (B, params.d))
    goals = np.broadcast_to(np.asarray(goals, dtype=float), (B, params.d))
    out, _, _ = _predict(params, x, t, starts, goals)
    return out.reshape(B, params.N, params.d)


def predict_noise(params: DenoiserParams, traj_t: Trajectory | np.ndarray, t: int, ctx: TaskContext) -> np.ndarray:
    x = traj_t.waypoints if isinstance(traj_t, Trajectory) else np.asarray(traj_t, dtype=float)
    if x.shape != (params.N, params.d):
        raise StructuralError(f"trajectory shape {x.shape} != ({params.N}, {params.d})")
    if ctx.start.shape != (params.d,):
        raise StructuralError(f"context dimension {ctx.start.shape} != ({params.d},)")
    if not 1 <= int(t) <= params.T:
        raise UsageError(f"noise level {t} outside [1, {params.T}]")
    return predict_noise_batch(params, x[None], [t], ctx.start[None], ctx.goal[None])[0]


def loss_and_gradient_fixed(params: DenoiserParams, x0, starts, goals, t, eps, sched: DiffusionSchedule):
    """Loss and exact gradient for an explicit (t, eps) assignment per item.

    ``x0`` is (B, N, d) in normalized coordinates. Loss is the mean squared
    error over batch items and coordinates.
    """
    x0 = np.asarray(x0, dtype=float)
    B = x0.shape[0]
    if B == 0:
        raise UsageError("empty batch")
    t = np.asarray(t, dtype=int)
    ab = sched.alpha_bar[t][:, None, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    starts = np.broadcast_to(np.asarray(starts, dtype=float), (B, params.d))
    goals = np.broadcast_to(np.asarray(goals, dtype=float), (B, params.d))
    out, feats, cache = _predict(params, xt, t, starts, goals)
    resid = out - eps.reshape(B, -1)
    loss = float(np.mean(resid**2))
    dout = 2.0 * resid / resid.size
    return loss, _backward(params, feats, cache, dout)


def sample_noise_assignment(rng: np.random.Generator, B: int, N: int, d: int, T: int):
    t = rng.integers(1, T + 1, size=B)
    eps = rng.standard_normal((B, N, d))
    return t, eps


def loss_and_gradient(params: DenoiserParams, batch, sched: DiffusionSchedule, rng_seed) -> tuple[float, np.ndarray]:
    """DDPM epsilon-prediction loss on ``batch`` = (x0, starts, goals).

    Draws t uniformly from [1, T] and eps ~ N(0, I) per item.
    """
    x0, starts, goals = batch
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 3 or x0.shape[0] == 0:
        raise UsageError("batch must be a non-empty (B, N, d) array")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    t, eps = sample_noise_assignment(rng, x0.shape[0], params.N, params.d, sched.T)
    return loss_and_gradient_fixed(params, x0, starts, goals, t, eps, sched)


@dataclass
class TrainingResult:
    """Trained parameters plus losses.

    ``initial_loss`` and ``final_loss`` are both measured on the whole dataset
    under one fixed (t, eps) draw, before the first and after the last update,
    so they are directly comparable. ``epoch_losses`` are running means.
    """

    params: DenoiserParams
    epoch_losses: list[float]
    initial_loss: float
    final_loss: float


def evaluation_loss(params: DenoiserParams, x0, starts, goals, t, eps, sched: DiffusionSchedule,
                    chunk: int = 1024) -> float:
    """Mean squared noise-prediction error for a fixed assignment, without gradients."""
    B = len(x0)
    total = 0.0
    for i in range(0, B, chunk):
        sl = slice(i, i + chunk)
        ab = sched.alpha_bar[t[sl]][:, None, None]
        xt = np.sqrt(ab) * x0[sl] + np.sqrt(1.0 - ab) * eps[sl]
        out, _, _ = _predict(params, xt, t[sl], starts[sl], goals[sl])
        total += float(np.sum((out - eps[sl].reshape(len(xt), -1)) ** 2))
    return total / eps.size


def train(dataset, cfg: TrainingConfig, sched: DiffusionSchedule, hidden=256, depth=4, time_dim=32,
          preconditioning="linear_gaussian", callback=None) -> TrainingResult:
    """Fit the noise predictor on ``dataset`` (a TrajectoryDataset).

    The optimizer scales each step by a bias-corrected running second moment
    of the gradient (no first-moment momentum).
    """
    if cfg.epochs < 1:
        raise ConfigError("epochs must be >= 1")
    trajs = dataset.trajectories
    if len(trajs) == 0:
        raise UsageError("dataset is empty")
    N, d = trajs[0].waypoints.shape
    if any(tr.waypoints.shape != (N, d) for tr in trajs):
        raise StructuralError("dataset trajectories have inconsistent shapes")
    lo, hi = np.asarray(dataset.bounds[0], float), np.asarray(dataset.bounds[1], float)
    root = np.random.SeedSequence(cfg.seed)
    init_seq, data_seq, eval_seq = root.spawn(3)
    nz = Normalizer(lo, hi)
    X = nz.to_unit(np.stack([tr.waypoints for tr in trajs]))
    S = np.stack([c.start for c in dataset.contexts])
    Gl = np.stack([c.goal for c in dataset.contexts])
    resolution = getattr(dataset, "resolution", None)
    dev = X - nz.to_unit(straight_paths(S, Gl, N, resolution))
    path_cov = np.einsum("mid,mjd->ij", dev, dev) / (dev.shape[0] * d)
    params = init_params(N, d, sched.T, lo, hi, hidden=hidden, depth=depth, time_dim=time_dim,
                         seed=int(init_seq.generate_state(1)[0]),
                         beta_min=float(sched.beta[1]), beta_max=float(sched.beta[-1]),
                         preconditioning=preconditioning, path_cov=path_cov, resolution=resolution)
    if not np.allclose(params.alpha_bar, sched.alpha_bar, rtol=1e-12, atol=0):
        raise ConfigError("training schedule is not a geometric beta schedule the checkpoint can describe")
    rng = np.random.default_rng(data_seq)
    M = X.shape[0]
    t_eval, eps_eval = sample_noise_assignment(np.random.default_rng(eval_seq), M, N, d, sched.T)
    initial_loss = evaluation_loss(params, X, S, Gl, t_eval, eps_eval, sched)

    v = np.zeros_like(params.flat)
    rho, tiny = 0.999, 1e-8
    step = 0
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(M)
        total, count = 0.0, 0
        for i in range(0, M, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            t, eps = sample_noise_assignment(rng, len(idx), N, d, sched.T)
            loss, g = loss_and_gradient_fixed(params, X[idx], S[idx], Gl[idx], t, eps, sched)
            step += 1
            v *= rho
            v += (1.0 - rho) * g * g
            vhat = v / (1.0 - rho**step)
            params.flat -= cfg.learning_rate * g / (np.sqrt(vhat) + tiny)
            total += loss * len(idx)
            count += len(idx)
        epoch_losses.append(total / count)
        if callback is not None:
            callback(epoch, epoch_losses[-1])
        log.debug("epoch %d loss %.5f", epoch, epoch_losses[-1])
    final_loss = evaluation_loss(params, X, S, Gl, t_eval, eps_eval, sched)
    return TrainingResult(params=params, epoch_losses=epoch_losses, initial_loss=initial_loss,
                          final_loss=final_loss)


def save_checkpoint(params: DenoiserParams, path) -> Path:
    path = Path(path)
    header = dict(params.header(), version=CHECKPOINT_VERSION, n_params=params.size)
    payload = params.flat.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    return path


def load_checkpoint(path, **expected) -> DenoiserParams:
    """Load a checkpoint, optionally asserting header fields (e.g. ``N=32``)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise LoadError("not a checkpoint file (bad magic)", field="magic")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise LoadError("checkpoint header truncated", field="header")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise LoadError(f"checkpoint header unreadable: {exc}", field="header") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"unsupported checkpoint version {header.get('version')}", field="version")
    for key, want in expected.items():
        if key not in header:
            raise LoadError(f"checkpoint header lacks field {key}", field=key)
        if header[key] != want:
            raise LoadError(f"checkpoint field {key}={header[key]} does not match expected {want}", field=key)
    try:
        arch = {k: header[k] for k in ("N", "d", "T", "hidden", "depth", "time_dim", "beta_min", "beta_max",
                                       "preconditioning", "path_cov", "resolution", "lo", "hi")}
    except KeyError as exc:
        raise LoadError(f"checkpoint header lacks field {exc.args[0]}", field=exc.args[0]) from None
    n_needed = _param_count(arch)
    if header.get("n_params") != n_needed:
        raise LoadError(
            f"header n_params={header.get('n_params')} inconsistent with architecture ({n_needed})", field="n_params"
        )
    payload = rest[nl + 1:]
    if len(payload) != 8 * n_needed:
        raise LoadError(f"payload has {len(payload)} bytes, expected {8 * n_needed}", field="payload")
    flat = np.frombuffer(payload, dtype="<f8").astype(float)
    return DenoiserParams(**arch, flat=flat)


def _param_count(arch: dict) -> int:
    N, d, h, depth, td = arch["N"], arch["d"], arch["hidden"], arch["depth"], arch["time_dim"]
    in_dim = 2 * N * d + td + 2 * d
    return in_dim * h + h + depth * (h * h + h) + h * N * d + N * d
