"""Regularized conditional flow matching for trajectory refinement.

The vector field is a small tanh MLP written directly in numpy with a
hand-derived backward pass, so every gradient is checkable against finite
differences. Trajectories are batched as arrays of shape (B, K, 2); the
first and last waypoints are boundary conditions and never move.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import OccupancyGrid, distance_transform
from .interp import bilinear_with_grad
from .trajectory import Trajectory

log = logging.getLogger(__name__)

D_FLOOR = 1e-4
MAGIC = b"FFLOWMDL"
HEADER = "<IIIIIdI"
FORMAT_VERSION = 2
OBS_PER_WAYPOINT = 3
OBS_CLIP = 1.0


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


class NonFiniteError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Distances and regularizers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DistanceMap:
    """Cell-centered clearance values (meters) with bilinear lookup."""

    values: np.ndarray
    resolution: float

    @classmethod
    def from_grid(cls, grid: OccupancyGrid) -> "DistanceMap":
        return cls(distance_transform(grid), grid.resolution)

    @classmethod
    def from_success(cls, field_values: np.ndarray, resolution: float, scale: float = 0.5) -> "DistanceMap":
        """Ablation variant: clearance taken proportional to 1 - F."""
        return cls(scale * (1.0 - np.clip(field_values, 0.0, 1.0)), resolution)

    def query(self, points):
        return bilinear_with_grad(self.values, self.resolution, points)


def observe(distances: DistanceMap, tau) -> np.ndarray:
    """Per-waypoint clearance observation [d, dd/dx, dd/dy], flattened per trajectory.

    Clearance is clipped at OBS_CLIP meters (its gradient is zeroed there).
    """
    x = _points(tau)
    d, g = distances.query(x)
    far = d >= OBS_CLIP
    g = np.where(far[..., None], 0.0, g)
    obs = np.concatenate([np.minimum(d, OBS_CLIP)[..., None], g], axis=-1)
    return obs.reshape(x.shape[:-2] + (-1,))


def _points(tau) -> np.ndarray:
    return tau.waypoints if isinstance(tau, Trajectory) else np.asarray(tau, dtype=float)


def third_differences(x: np.ndarray) -> np.ndarray:
    return x[..., 3:, :] - 3 * x[..., 2:-1, :] + 3 * x[..., 1:-2, :] - x[..., :-3, :]


def smooth_loss(tau) -> float:
    """Sum of squared third finite differences of the waypoints."""
    x = _points(tau)
    if x.shape[-2] < 4:
        raise ValueError("smoothness loss needs at least 4 waypoints")
    return float(np.sum(third_differences(x) ** 2))


def smooth_loss_grad(tau) -> np.ndarray:
    x = _points(tau)
    if x.shape[-2] < 4:
        raise ValueError("smoothness loss needs at least 4 waypoints")
    d = 2.0 * third_differences(x)
    g = np.zeros_like(x)
    g[..., 3:, :] += d
    g[..., 2:-1, :] -= 3 * d
    g[..., 1:-2, :] += 3 * d
    g[..., :-3, :] -= d
    return g


def safe_loss(tau, distances: DistanceMap, epsilon: float, d_floor: float = D_FLOOR) -> float:
    """Log barrier -sum log(max(d - eps, d_floor)); finite everywhere."""
    return float(_safe_terms(_points(tau), distances, epsilon, d_floor)[0].sum())


def safe_loss_grad(tau, distances: DistanceMap, epsilon: float, d_floor: float = D_FLOOR) -> np.ndarray:
    return _safe_terms(_points(tau), distances, epsilon, d_floor)[1]


def _safe_terms(x, distances, epsilon, d_floor):
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    d, gd = distances.query(x)
    arg = d - epsilon
    active = arg > d_floor
    terms = -np.log(np.where(active, arg, d_floor))
    grad = np.where(active[..., None], -gd / np.where(active, arg, 1.0)[..., None], 0.0)
    return terms, grad


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def time_features(t, n_freq: int) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    k = 2.0 * np.pi * np.arange(1, n_freq + 1)[None, :]
    return np.hstack([t, np.sin(k * t), np.cos(k * t)])


@dataclass(eq=False)
class FlowModel:
    """MLP v(tau, t, z_c) -> velocity for every waypoint coordinate.

    Inputs are the flattened trajectory times ``scale``, sinusoidal time
    features and the raw context vector, followed (when ``n_obs`` > 0) by
    ``n_obs`` clearance observations per waypoint, see ``observe``.
    Outputs are divided by ``scale`` and zeroed on the endpoint coordinates.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    n_waypoints: int
    context_dim: int
    n_freq: int = 4
    scale: float = 1.0
    n_obs: int = 0

    @classmethod
    def init(cls, n_waypoints: int, context_dim: int, hidden: Sequence[int] = (64, 64, 64), n_freq: int = 4,
             scale: float = 1.0, seed: int = 0, n_obs: int = 0) -> "FlowModel":
        rng = np.random.default_rng(seed)
        dims = [2 * n_waypoints + 1 + 2 * n_freq + context_dim + n_obs * n_waypoints, *hidden, 2 * n_waypoints]
        weights = [rng.normal(0.0, 1.0 / np.sqrt(a), (a, b)) for a, b in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(b) for b in dims[1:]]
        return cls(weights, biases, n_waypoints, context_dim, n_freq, scale, n_obs)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def mask(self) -> np.ndarray:
        m = np.ones((self.n_waypoints, 2))
        m[0] = m[-1] = 0.0
        return m.ravel()

    def get_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def set_params(self, theta: np.ndarray) -> None:
        i = 0
        for layer in range(len(self.weights)):
            for arrs in (self.weights, self.biases):
                a = arrs[layer]
                arrs[layer] = np.asarray(theta[i:i + a.size], dtype=float).reshape(a.shape).copy()
                i += a.size

    def copy(self) -> "FlowModel":
        return FlowModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.n_waypoints, self.context_dim, self.n_freq, self.scale, self.n_obs)

    def _inputs(self, tau, t, z_c, obs=None) -> np.ndarray:
        tau = np.asarray(tau, float).reshape(-1, 2 * self.n_waypoints)
        z_c = np.asarray(z_c, float).reshape(tau.shape[0], -1)
        if z_c.shape[1] != self.context_dim:
            raise ValueError(f"context has dimension {z_c.shape[1]}, model expects {self.context_dim}")
        t = np.broadcast_to(np.asarray(t, float), (tau.shape[0],))
        parts = [tau * self.scale, time_features(t, self.n_freq), z_c]
        if self.n_obs:
            if obs is None:
                raise ValueError("this model needs clearance observations")
            parts.append(np.asarray(obs, float).reshape(tau.shape[0], self.n_obs * self.n_waypoints))
        return np.hstack(parts)

    def forward(self, tau, t, z_c, obs=None):
        """Return flat velocities (B, 2K) and the activation cache for backward."""
        h = self._inputs(tau, t, z_c, obs)
        cache = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            h = a if i == last else np.tanh(a)
            cache.append(h)
        v = h * (self.mask / self.scale)
        return v, cache

    def backward(self, cache, grad_v: np.ndarray) -> np.ndarray:
        """Parameter gradient (flat, in get_params order) given dL/dv."""
        g = grad_v * (self.mask / self.scale)
        grads_w, grads_b = [], []
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i != last:
                g = g * (1.0 - cache[i + 1] ** 2)
            grads_w.append(cache[i].T @ g)
            grads_b.append(g.sum(axis=0))
            if i:
                g = g @ self.weights[i].T
        grads_w.reverse()
        grads_b.reverse()
        return np.concatenate([a.ravel() for pair in zip(grads_w, grads_b) for a in pair])

    def velocity(self, tau, t, z_c, obs=None) -> np.ndarray:
        """Velocity with the same waypoint layout as ``tau`` ((K, 2) or (B, K, 2))."""
        tau = np.asarray(tau, float)
        v, _ = self.forward(tau, t, z_c, obs)
        return v.reshape(tau.shape)

    __call__ = velocity


# ---------------------------------------------------------------------------
# Interpolant and loss
# ---------------------------------------------------------------------------

def interpolant(tau0, tau1, t):
    """Linear path tau_t = (1-t) tau0 + t tau1 and its constant velocity."""
    a, b = _points(tau0), _points(tau1)
    if a.shape != b.shape:
        raise ValueError(f"waypoint counts differ: {a.shape} vs {b.shape}")
    t = np.asarray(t, float)
    tt = t.reshape(t.shape + (1,) * (a.ndim - t.ndim)) if t.ndim else t
    tau_t = (1.0 - tt) * a + tt * b
    u = b - a
    if isinstance(tau0, Trajectory) and a.ndim == 2:
        return Trajectory(tau_t), u
    return tau_t, u


@dataclass
class TrainConfig:
    rho: float = 0.1
    kappa: float = 0.01
    epsilon: float = 0.15
    learning_rate: float = 2e-3
    batch_size: int = 64
    steps: int = 3000
    seed: int = 0
    # where the regularizers are evaluated: "prediction" is the one-step
    # endpoint estimate tau_t + (1 - t) v, "interpolant" is tau_t itself
    reg_state: str = "prediction"
    grad_clip: float = 10.0
    d_floor: float = D_FLOOR

    def __post_init__(self):
        if self.rho < 0 or self.kappa < 0:
            raise ValueError("rho and kappa must be non-negative")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.reg_state not in ("prediction", "interpolant"):
            raise ValueError(f"unknown reg_state {self.reg_state!r}")


@dataclass
class Batch:
    tau0: np.ndarray      # (B, K, 2)
    tau1: np.ndarray      # (B, K, 2)
    t: np.ndarray         # (B,)
    z_c: np.ndarray       # (B, D)
    dist_index: np.ndarray  # (B,) index into the distance map list


@dataclass
class LossTerms:
    total: float
    fm: float
    smooth: float
    safe: float


def _as_distance_list(distances) -> list[DistanceMap]:
    return [distances] if isinstance(distances, DistanceMap) else list(distances)


def regcfm_loss(model: FlowModel, batch: Batch, distances, config: TrainConfig,
                with_grad: bool = False):
    """L_FM + rho * L_smooth + kappa * L_safe, each averaged over the batch.

    Returns LossTerms, or (LossTerms, flat parameter gradient) when
    ``with_grad`` is set.
    """
    dmaps = _as_distance_list(distances)
    B, K, _ = batch.tau0.shape
    t = np.asarray(batch.t, float)
    tau_t, u = interpolant(batch.tau0, batch.tau1, t)
    obs = None
    if model.n_obs:
        obs = np.zeros((B, model.n_obs * K))
        for j in np.unique(batch.dist_index):
            sel = batch.dist_index == j
            obs[sel] = observe(dmaps[int(j)], tau_t[sel])
    v_flat, cache = model.forward(tau_t, t, batch.z_c, obs)
    if not np.all(np.isfinite(v_flat)):
        raise NonFiniteError("model produced non-finite velocities")
    v = v_flat.reshape(B, K, 2)
    diff = v - u
    fm = float(np.sum(diff ** 2) / B)
    pred = config.reg_state == "prediction"
    state = tau_t + (1.0 - t)[:, None, None] * v if pred else tau_t
    smooth = float(np.sum(third_differences(state) ** 2) / B)
    safe_sum = 0.0
    safe_grad = np.zeros_like(state)
    for j in np.unique(batch.dist_index):
        sel = batch.dist_index == j
        terms, g = _safe_terms(state[sel], dmaps[int(j)], config.epsilon, config.d_floor)
        safe_sum += float(terms.sum())
        safe_grad[sel] = g
    safe = safe_sum / B
    total = fm + config.rho * smooth + config.kappa * safe
    terms = LossTerms(total, fm, smooth, safe)
    if not with_grad:
        return terms
    grad_v = 2.0 * diff / B
    if pred:
        reg = config.rho * smooth_loss_grad(state) + config.kappa * safe_grad
        grad_v = grad_v + (1.0 - t)[:, None, None] * reg / B
    return terms, model.backward(cache, grad_v.reshape(B, -1))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingSet:
    tau0: np.ndarray        # (N, K, 2)
    tau1: np.ndarray        # (N, K, 2)
    z_c: np.ndarray         # (N, D)
    dist_index: np.ndarray  # (N,)
    distances: list = field(default_factory=list)

    def __post_init__(self):
        self.tau0 = np.asarray(self.tau0, float)
        self.tau1 = np.asarray(self.tau1, float)
        self.z_c = np.asarray(self.z_c, float).reshape(self.tau0.shape[0], -1)
        self.dist_index = np.asarray(self.dist_index, dtype=np.int64)
        if self.tau0.shape[0] == 0:
            raise ValueError("empty training set")
        if self.tau0.shape != self.tau1.shape:
            raise ValueError("source and target trajectories must share a shape")

    def __len__(self):
        return self.tau0.shape[0]


@dataclass
class TrainResult:
    model: FlowModel
    trace: list[float]
    initial_loss: float
    final_loss: float


def _eval_batch(data: TrainingSet, rng: np.random.Generator, size: int = 256) -> Batch:
    idx = rng.integers(0, len(data), size)
    return Batch(data.tau0[idx], data.tau1[idx], rng.random(size), data.z_c[idx], data.dist_index[idx])


def train(model: FlowModel, data: TrainingSet, distances=None, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Adam on the regularized loss; deterministic for a fixed config.seed.

    ``initial_loss``/``final_loss`` are measured on one fixed held batch.
    """
    dmaps = _as_distance_list(distances if distances is not None else data.distances)
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    probe = _eval_batch(data, np.random.default_rng([config.seed, 1]))
    try:
        initial = regcfm_loss(model, probe, dmaps, config).total
    except NonFiniteError as exc:
        raise TrainingDivergedError(f"initial model is not finite: {exc}", []) from exc
    theta = model.get_params()
    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace: list[float] = []
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(data), config.batch_size)
        batch = Batch(data.tau0[idx], data.tau1[idx], rng.random(config.batch_size), data.z_c[idx],
                      data.dist_index[idx])
        try:
            terms, g = regcfm_loss(model, batch, dmaps, config, with_grad=True)
        except NonFiniteError as exc:
            raise TrainingDivergedError(str(exc), trace) from exc
        if not np.isfinite(terms.total) or not np.all(np.isfinite(g)):
            trace.append(terms.total)
            raise TrainingDivergedError(f"loss became non-finite at step {step}", trace)
        trace.append(terms.total)
        norm = np.linalg.norm(g)
        if config.grad_clip and norm > config.grad_clip:
            g = g * (config.grad_clip / norm)
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g * g
        theta = theta - config.learning_rate * (m / (1 - b1 ** step)) / (np.sqrt(s / (1 - b2 ** step)) + eps)
        model.set_params(theta)
        if step % 500 == 0:
            log.debug("step %d loss %.5f (fm %.5f)", step, terms.total, terms.fm)
    final = regcfm_loss(model, probe, dmaps, config).total
    return TrainResult(model, trace, initial, final)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

VelocityFn = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


def refine(model, tau0, z_c, n_steps: int, start=None, goal=None, distances: DistanceMap | None = None) -> Trajectory:
    """Explicit Euler integration of the flow from t=0 to t=1 in ``n_steps`` steps.

    ``model`` is a FlowModel or any callable ``f(tau (K,2), t, z_c) -> (K,2)``.
    Endpoints are re-pinned after every step. Models that observe clearance
    need ``distances``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if getattr(model, "n_obs", 0) and distances is None:
        raise ValueError("this model needs a distance map to refine")
    x = _points(tau0).copy()
    start = x[0].copy() if start is None else np.asarray(start, float)
    goal = x[-1].copy() if goal is None else np.asarray(goal, float)
    if getattr(model, "n_obs", 0):
        def f(tau, t, z):
            return model.velocity(tau, t, z, observe(distances, tau))
    else:
        f = model.velocity if hasattr(model, "velocity") else model
    dt = 1.0 / n_steps
    for k in range(n_steps):
        x = x + dt * np.asarray(f(x, k * dt, z_c), float).reshape(x.shape)
        x[0], x[-1] = start, goal
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite trajectory at Euler step {k + 1}")
    return Trajectory(x)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(model: FlowModel, path) -> None:
    """Binary layout, all little-endian:

    magic ``FFLOWMDL`` | u32 version | u32 n_waypoints | u32 context_dim |
    u32 n_freq | u32 n_obs | f64 scale | u32 n_layers | u32 dims[n_layers + 1] |
    per layer: f64 W[in * out] (row-major) then f64 b[out].
    """
    dims = model.dims
    parts = [MAGIC, struct.pack(HEADER, FORMAT_VERSION, model.n_waypoints, model.context_dim, model.n_freq,
                                model.n_obs, model.scale, len(model.weights)),
             struct.pack(f"<{len(dims)}I", *dims)]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> FlowModel:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        if data.startswith(b"fieldflow-model"):
            return parse_model_text(data.decode("ascii"))
        raise ValueError("not a flow model checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    head = struct.calcsize(HEADER)
    version, k, d, nf, n_obs, scale, nl = struct.unpack_from(HEADER, data, 8)
    pos = 8 + head
    dims = list(struct.unpack_from(f"<{nl + 1}I", data, pos))
    pos += 4 * (nl + 1)
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(np.frombuffer(data, "<f8", a * b, pos).reshape(a, b).astype(float))
        pos += 8 * a * b
        biases.append(np.frombuffer(data, "<f8", b, pos).astype(float))
        pos += 8 * b
    return FlowModel(weights, biases, k, d, nf, scale, n_obs)


def format_model_text(model: FlowModel) -> str:
    buf = io.StringIO()
    buf.write(f"fieldflow-model,{FORMAT_VERSION}\n")
    buf.write(f"n_waypoints,{model.n_waypoints}\ncontext_dim,{model.context_dim}\nn_freq,{model.n_freq}\n")
    buf.write(f"n_obs,{model.n_obs}\nscale,{float(model.scale)!r}\ndims,{','.join(str(d) for d in model.dims)}\n")
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        buf.write(f"W{i}," + ",".join(repr(float(v)) for v in w.ravel()) + "\n")
        buf.write(f"b{i}," + ",".join(repr(float(v)) for v in b.ravel()) + "\n")
    return buf.getvalue()


def parse_model_text(text: str) -> FlowModel:
    rows = {ln.split(",", 1)[0]: ln.split(",", 1)[1] for ln in text.strip().splitlines()}
    dims = [int(v) for v in rows["dims"].split(",")]
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        weights.append(np.array([float(v) for v in rows[f"W{i}"].split(",")]).reshape(a, b))
        biases.append(np.array([float(v) for v in rows[f"b{i}"].split(",")]))
    return FlowModel(weights, biases, int(rows["n_waypoints"]), int(rows["context_dim"]), int(rows["n_freq"]),
                     float(rows["scale"]), int(rows.get("n_obs", 0)))


def save_model_text(model: FlowModel, path) -> None:
    Path(path).write_text(format_model_text(model))
