"""End-to-end pipeline, ablation runs and refinement-step sweeps."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import difp, regcfm
from .env import (LabelField, Scenario, ScenarioKind, generate_scenario, path_to_points, read_scenario,
                  shortest_path_length, synthesize_demonstrations)
from .field import SuccessField, solve_field
from .metrics import EpisodeResult, MetricsReport, aggregate, evaluate_episode, trajectory_collides
from .prior import MixturePrior, ScoreWeights, extract_prior, hausdorff, peaks_prior, sample_prior
from .trajectory import Trajectory

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    FULL = "Full"
    GAUSSIAN = "GaussianPrior"
    PEAKS = "PeaksPrior"
    NO_SMOOTH = "NoSmooth"
    NO_SAFE = "NoSafe"
    NO_REGULARIZERS = "NoRegularizers"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower() or m.name.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}")

    @property
    def prior_kind(self) -> str:
        return {Mode.GAUSSIAN: "gaussian", Mode.PEAKS: "peaks"}.get(self, "mixture")


ALL_MODES = tuple(Mode)


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    # scenarios
    kinds: tuple = ("TJunction", "Corridor", "Clutter")
    episodes_per_kind: int = 40
    train_scenarios_per_kind: int = 40
    size: int = 48
    resolution: float = 0.1
    scenario_files: tuple = ()
    n_demos: int = 20
    demo_noise: float = 0.5
    # features
    feature_frames: int = 8
    # side of the pooled occupancy grid appended to every feature frame (0: none)
    scene_cells: int = 8
    # field
    mu: float = 1.0
    nu: float = 0.05
    solver: str = "cg"
    # prior
    K: int = 8
    M: int = 3
    temperature: float = 0.5
    delta: float = 1e-3
    n_waypoints: int = 16
    score_alpha: float = 1.0
    score_beta: float = 0.1
    score_gamma: float = 0.05
    peaks_threshold: float = 0.8
    # Gaussian smoothing (meters of arc length) applied to demonstrations
    # before they are used as flow-matching targets
    expert_smoothing: float = 0.15
    gaussian_sigma: float = 0.5
    # how noise samples are matched to demonstrations when training the
    # GaussianPrior baseline: "independent" (random demo) or "nearest"
    gaussian_coupling: str = "independent"
    # flow
    rho: float = 0.1
    kappa: float = 0.01
    epsilon: float = 0.15
    # barrier distance: "clearance" (distance transform) or "success" (scaled 1 - F)
    barrier_distance: str = "clearance"
    n_steps: int = 10
    train_steps: int = 3000
    learning_rate: float = 2e-3
    batch_size: int = 64
    hidden: tuple = (64, 64, 64)
    n_freq: int = 4
    reg_state: str = "prediction"
    # the velocity field also sees clearance and its gradient at every waypoint
    observe_clearance: bool = False
    samples_per_scenario: int = 16
    # metrics
    step_length: float = 0.05
    max_steps: int = 500
    success_radius: float = 0.2
    nominal_speed: float = 0.5
    ms_successes_only: bool = False
    # run
    mode: str = "Full"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.kinds = tuple(ScenarioKind.parse(k).value for k in self.kinds)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.scenario_files = tuple(str(p) for p in self.scenario_files)
        self.mode = Mode.parse(self.mode).value
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.episodes_per_kind < 1 or self.train_scenarios_per_kind < 1:
            raise ValueError("episode and training counts must be positive")
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be non-negative")
        if self.gaussian_coupling not in ("independent", "nearest"):
            raise ValueError(f"unknown gaussian_coupling {self.gaussian_coupling!r}")
        if self.barrier_distance not in ("clearance", "success"):
            raise ValueError(f"unknown barrier_distance {self.barrier_distance!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        for p in self.scenario_files:
            if not Path(p).is_file():
                raise FileNotFoundError(f"scenario file not found: {p}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def with_mode(self, mode) -> "PipelineConfig":
        return replace(self, mode=Mode.parse(mode).value)

    @property
    def score_weights(self) -> ScoreWeights:
        return ScoreWeights(self.score_alpha, self.score_beta, self.score_gamma)

    def train_config(self, mode=None) -> regcfm.TrainConfig:
        mode = Mode.parse(mode or self.mode)
        rho = 0.0 if mode in (Mode.NO_SMOOTH, Mode.NO_REGULARIZERS) else self.rho
        kappa = 0.0 if mode in (Mode.NO_SAFE, Mode.NO_REGULARIZERS) else self.kappa
        return regcfm.TrainConfig(rho=rho, kappa=kappa, epsilon=self.epsilon, learning_rate=self.learning_rate,
                                  batch_size=self.batch_size, steps=self.train_steps, seed=self.seed,
                                  reg_state=self.reg_state)


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_dict(json.loads(Path(path).read_text()))


def config_hash(config: PipelineConfig) -> str:
    """Short sha256 of the canonical JSON form (excludes the worker count)."""
    d = config.to_dict()
    d.pop("workers")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Scenario sets
# ---------------------------------------------------------------------------

_KIND_SALT = {"TJunction": 11, "Corridor": 23, "Clutter": 37, "Open": 41}
EVAL_SEED_BASE = 0
TRAIN_SEED_BASE = 500_000


def _scenario_seed(config: PipelineConfig, base: int, i: int) -> int:
    return base + config.seed * 1000 + i


def benchmark_scenarios(config: PipelineConfig) -> list[Scenario]:
    """Evaluation scenarios, kind-major then seed order."""
    if config.scenario_files:
        return [read_scenario(p) for p in config.scenario_files]
    return [generate_scenario(k, _scenario_seed(config, EVAL_SEED_BASE, i), config.size, config.resolution)
            for k in config.kinds for i in range(config.episodes_per_kind)]


def training_scenarios(config: PipelineConfig) -> list[Scenario]:
    """Training scenarios drawn from a seed range disjoint from evaluation."""
    return [generate_scenario(k, _scenario_seed(config, TRAIN_SEED_BASE, i), config.size, config.resolution)
            for k in config.kinds for i in range(config.train_scenarios_per_kind)]


def _rng(config: PipelineConfig, scenario: Scenario, purpose: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, _KIND_SALT.get(scenario.kind.value, 0), scenario.seed, purpose])


# ---------------------------------------------------------------------------
# Per-scenario preparation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ScenarioContext:
    """Everything about one scenario that does not depend on the ablation mode."""

    scenario: Scenario
    labels: LabelField
    field: SuccessField
    mixture: MixturePrior
    peaks: Trajectory
    demonstrations: tuple
    distances: regcfm.DistanceMap
    z_c: np.ndarray
    shortest_length: float


def _stage(name: str, fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise PipelineError(name, exc) from exc


def scenario_features(config: PipelineConfig, scenario: Scenario) -> np.ndarray:
    scene = difp.scene_descriptor(scenario.grid.cells, config.scene_cells) if config.scene_cells else None
    return difp.synthetic_features(scenario.start, scenario.goal, scenario.grid.extent,
                                   _rng(config, scenario, 1), T=config.feature_frames, scene=scene)


def prepare_scenario(config: PipelineConfig, scenario: Scenario) -> ScenarioContext:
    """env -> difp -> field -> prior for one scenario."""
    grid = scenario.grid
    labels = _stage("env", synthesize_demonstrations, scenario, config.n_demos, config.demo_noise, config.seed)
    shortest = _stage("env", shortest_path_length, scenario)
    Z = _stage("difp", scenario_features, config, scenario)
    z_c = _stage("difp", difp.refine, Z).z_c
    fld = _stage("field", solve_field, labels, grid, config.mu, config.nu, config.solver)
    mixture = _stage("prior", extract_prior, fld, grid, scenario.start, scenario.goal, config.K, config.M,
                     config.temperature, config.delta, config.n_waypoints, config.score_weights)
    peaks = _stage("prior", peaks_prior, fld, scenario.start, scenario.goal, config.n_waypoints,
                   config.peaks_threshold)
    demos = tuple(expert_trajectory(grid, path_to_points(grid, p, scenario.start, scenario.goal),
                                    config.n_waypoints, config.expert_smoothing)
                  for p in labels.demonstrations)
    if config.barrier_distance == "success":
        dmap = regcfm.DistanceMap.from_success(fld.values, grid.resolution)
    else:
        dmap = regcfm.DistanceMap.from_grid(grid)
    return ScenarioContext(scenario, labels, fld, mixture, peaks, demos, dmap, z_c, shortest)


def expert_trajectory(grid, points: np.ndarray, n_waypoints: int, smoothing: float,
                      spacing: float = 0.02) -> Trajectory:
    """Arc-length resampled demonstration, smoothed as far as stays collision-free.

    The densely resampled polyline is filtered with a Gaussian kernel of
    ``smoothing`` meters (endpoints pinned). The kernel is halved until the
    final ``n_waypoints`` polyline does not enter an occupied cell.
    """
    raw = Trajectory(points)
    n_dense = max(int(np.ceil(raw.length() / spacing)) + 1, n_waypoints)
    dense = raw.resample(n_dense).waypoints
    sigma = smoothing
    while sigma >= spacing:
        sm = ndimage.gaussian_filter1d(dense, sigma / spacing, axis=0, mode="nearest")
        sm[0], sm[-1] = dense[0], dense[-1]
        cand = Trajectory(sm).resample(n_waypoints)
        if not trajectory_collides(grid, cand.waypoints):
            return cand
        sigma /= 2.0
    return raw.resample(n_waypoints)


def gaussian_prior(start, goal, n_waypoints: int, sigma: float, rng: np.random.Generator) -> Trajectory:
    """Straight line with isotropic noise on the interior waypoints; endpoints pinned."""
    line = Trajectory.between(start, goal, n_waypoints).waypoints.copy()
    line[1:-1] += rng.normal(0.0, sigma, line[1:-1].shape)
    return Trajectory(line)


def initial_trajectory(config: PipelineConfig, ctx: ScenarioContext, mode, rng: np.random.Generator) -> Trajectory:
    kind = Mode.parse(mode).prior_kind
    s = ctx.scenario
    if kind == "gaussian":
        return gaussian_prior(s.start, s.goal, config.n_waypoints, config.gaussian_sigma, rng)
    if kind == "peaks":
        return ctx.peaks.copy()
    return sample_prior(ctx.mixture, rng)


def nearest_demonstration(ctx: ScenarioContext, tau: Trajectory) -> Trajectory:
    d = [hausdorff(tau.waypoints, demo.waypoints) for demo in ctx.demonstrations]
    return ctx.demonstrations[int(np.argmin(d))]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def build_training_set(config: PipelineConfig, contexts: Sequence[ScenarioContext], mode) -> regcfm.TrainingSet:
    """Pairs (prior sample, expert demonstration) for each training scenario.

    Structured priors are paired with the nearest demonstration; Gaussian
    noise is paired with a uniformly drawn one unless configured otherwise.
    """
    mode = Mode.parse(mode)
    independent = mode.prior_kind == "gaussian" and config.gaussian_coupling == "independent"
    tau0, tau1, zc, idx = [], [], [], []
    for j, ctx in enumerate(contexts):
        rng = _rng(config, ctx.scenario, 2)
        for _ in range(config.samples_per_scenario):
            a = initial_trajectory(config, ctx, mode, rng)
            tau0.append(a.waypoints)
            if independent:
                tau1.append(ctx.demonstrations[int(rng.integers(len(ctx.demonstrations)))].waypoints)
            else:
                tau1.append(nearest_demonstration(ctx, a).waypoints)
            zc.append(ctx.z_c)
            idx.append(j)
    return regcfm.TrainingSet(np.array(tau0), np.array(tau1), np.array(zc), np.array(idx),
                              [c.distances for c in contexts])


def model_scale(config: PipelineConfig) -> float:
    return 2.0 / (config.size * config.resolution)


def train_mode_model(config: PipelineConfig, contexts: Sequence[ScenarioContext], mode=None) -> regcfm.TrainResult:
    mode = Mode.parse(mode or config.mode)
    data = build_training_set(config, contexts, mode)
    model = regcfm.FlowModel.init(config.n_waypoints, data.z_c.shape[1], config.hidden, config.n_freq,
                                  model_scale(config), seed=config.seed,
                                  n_obs=regcfm.OBS_PER_WAYPOINT if config.observe_clearance else 0)
    return _stage("regcfm", regcfm.train, model, data, None, config.train_config(mode))


def _model_key(config: PipelineConfig, mode: Mode) -> tuple:
    tc = config.train_config(mode)
    return mode.prior_kind, tc.rho, tc.kappa


class ModelCache:
    """Trains one model per distinct (prior kind, rho, kappa) and reuses it."""

    def __init__(self, config: PipelineConfig, train_contexts: Sequence[ScenarioContext] | None = None):
        self.config = config
        self._contexts = train_contexts
        self._models: dict = {}

    @property
    def contexts(self) -> Sequence[ScenarioContext]:
        if self._contexts is None:
            self._contexts = prepare_all(self.config, training_scenarios(self.config))
        return self._contexts

    def get(self, mode) -> regcfm.FlowModel:
        mode = Mode.parse(mode)
        key = _model_key(self.config, mode)
        if key not in self._models:
            log.info("training model for %s", mode.value)
            self._models[key] = train_mode_model(self.config, self.contexts, mode).model
        return self._models[key]

    def put(self, mode, model: regcfm.FlowModel) -> None:
        self._models[_model_key(self.config, Mode.parse(mode))] = model


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

def _pool_map(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _prepare_one(args):
    return prepare_scenario(*args)


def prepare_all(config: PipelineConfig, scenarios: Sequence[Scenario]) -> list[ScenarioContext]:
    return _pool_map(_prepare_one, [(config, s) for s in scenarios], config.workers)


def refine_episode(config: PipelineConfig, ctx: ScenarioContext, model, mode=None,
                   n_steps: int | None = None) -> Trajectory:
    mode = Mode.parse(mode or config.mode)
    n = config.n_steps if n_steps is None else n_steps
    if n < 1:
        raise ValueError("n_steps must be >= 1")
    s = ctx.scenario
    tau0 = initial_trajectory(config, ctx, mode, _rng(config, s, 3))
    return _stage("regcfm", regcfm.refine, model, tau0, ctx.z_c, n, s.start, s.goal, ctx.distances)


def run_episode(config: PipelineConfig, ctx: ScenarioContext, model, mode=None,
                n_steps: int | None = None) -> EpisodeResult:
    tau = refine_episode(config, ctx, model, mode, n_steps)
    return _stage("metrics", evaluate_episode, ctx.scenario, tau, ctx.distances, step_length=config.step_length,
                  max_steps=config.max_steps, success_radius=config.success_radius,
                  nominal_speed=config.nominal_speed, shortest_length=ctx.shortest_length)


def run_pipeline(config: PipelineConfig, scenario: Scenario, model: regcfm.FlowModel | None = None,
                 models: ModelCache | None = None) -> EpisodeResult:
    """One episode in ``config.mode``; trains a model first when none is given."""
    ctx = prepare_scenario(config, scenario)
    if model is None:
        model = (models or ModelCache(config)).get(config.mode)
    return run_episode(config, ctx, model)


def _episode_one(args):
    return run_episode(*args)


def run_episodes(config: PipelineConfig, contexts: Sequence[ScenarioContext], model, mode=None,
                 n_steps: int | None = None) -> list[EpisodeResult]:
    items = [(config, c, model, mode, n_steps) for c in contexts]
    return _pool_map(_episode_one, items, config.workers)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class AblationResult:
    modes: tuple
    reports: dict
    rows: list = field(default_factory=list)


def ablation_suite(config: PipelineConfig, contexts: Sequence[ScenarioContext], modes: Sequence = ALL_MODES,
                   models: ModelCache | None = None) -> AblationResult:
    """One MetricsReport per mode over the same scenario list (paired design)."""
    if not modes:
        raise ValueError("mode list is empty")
    models = models or ModelCache(config)
    h = config_hash(config)
    reports, rows = {}, []
    for m in modes:
        m = Mode.parse(m)
        eps = run_episodes(config, contexts, models.get(m), m)
        rep = aggregate(eps, config.ms_successes_only)
        reports[m.value] = rep
        rows.append({"config_hash": h, "seed": config.seed, "mode": m.value, **_report_columns(rep)})
    return AblationResult(tuple(Mode.parse(m).value for m in modes), reports, rows)


def _report_columns(rep: MetricsReport) -> dict:
    return {"SR": rep.sr, "SPL": rep.spl, "Coll.": rep.collision_rate, "MS": rep.ms,
            "SR_std": rep.sr_std, "SPL_std": rep.spl_std, "Coll._std": rep.collision_std,
            "MS_std": rep.ms_std, "episodes": rep.n_episodes}


@dataclass
class SweepResult:
    mode: str
    rows: list
    seconds_per_call: dict


def steps_sweep(config: PipelineConfig, contexts: Sequence[ScenarioContext], steps: Sequence[int], mode=None,
                models: ModelCache | None = None) -> SweepResult:
    """SR and collision rate as a function of the number of Euler steps.

    Wall-clock per refinement call is returned separately from the rows so
    the rows stay reproducible.
    """
    if not steps:
        raise ValueError("step list is empty")
    if any(int(n) < 1 for n in steps):
        raise ValueError("step counts must be >= 1")
    mode = Mode.parse(mode or config.mode)
    models = models or ModelCache(config)
    model = models.get(mode)
    h = config_hash(config)
    rows, timing = [], {}
    for n in steps:
        n = int(n)
        t0 = time.perf_counter()
        eps = run_episodes(config, contexts, model, mode, n)
        timing[n] = (time.perf_counter() - t0) / max(len(contexts), 1)
        rep = aggregate(eps, config.ms_successes_only)
        rows.append({"config_hash": h, "seed": config.seed, "mode": mode.value, "N": n, "SR": rep.sr,
                     "coll": rep.collision_rate})
    return SweepResult(mode.value, rows, timing)
