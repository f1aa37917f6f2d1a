"""Diverse corridor selection, candidate scoring and the weighted mixture prior."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from ..field import SuccessField, query_points
from ..trajectory import Trajectory, parse_trajectory_csv

DEFAULT_K = 8
DEFAULT_M = 3
DEFAULT_TEMPERATURE = 0.5
DEFAULT_WAYPOINTS = 16


@dataclass(frozen=True)
class ScoreWeights:
    alpha: float = 1.0   # mean success probability
    beta: float = 0.1    # per meter of length
    gamma: float = 0.05  # squared curvature


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric discrete Hausdorff distance between two point sets."""
    d = cdist(np.asarray(a, float), np.asarray(b, float))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def select_diverse(paths: Sequence[Trajectory], M: int, n_points: int = DEFAULT_WAYPOINTS) -> list[int]:
    """Greedy max-min Hausdorff subset; returns indices into ``paths``.

    ``paths`` must be ordered by energy, lowest first: index 0 seeds the set.
    Candidates at zero distance from the chosen set are never added.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if not paths:
        raise ValueError("no candidate paths")
    reps = [p.resample(n_points).waypoints for p in paths]
    chosen = [0]
    nearest = np.array([hausdorff(reps[0], r) for r in reps])
    while len(chosen) < M:
        nearest[chosen] = -1.0
        best = int(np.argmax(nearest))  # first index wins ties
        if nearest[best] <= 0.0:
            break
        chosen.append(best)
        nearest = np.minimum(nearest, [hausdorff(reps[best], r) for r in reps])
    return chosen


def turning_curvature(points: np.ndarray) -> np.ndarray:
    """Turning angle at each interior vertex divided by the mean adjacent segment length."""
    d = np.diff(points, axis=0)
    seg = np.linalg.norm(d, axis=1)
    ang_in = np.arctan2(d[:-1, 1], d[:-1, 0])
    ang_out = np.arctan2(d[1:, 1], d[1:, 0])
    turn = np.abs((ang_out - ang_in + np.pi) % (2 * np.pi) - np.pi)
    local = 0.5 * (seg[:-1] + seg[1:])
    turn = np.where((seg[:-1] > 0) & (seg[1:] > 0), turn, 0.0)
    return np.divide(turn, local, out=np.zeros_like(turn), where=local > 0)


def score_candidate(tau: Trajectory, field: SuccessField, weights: ScoreWeights = ScoreWeights()) -> float:
    pts = tau.waypoints
    kappa = turning_curvature(pts)
    return float(weights.alpha * query_points(field, pts).mean()
                 - weights.beta * tau.length()
                 - weights.gamma * np.sum(kappa ** 2))


def softmax_weights(scores, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(scores, float) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True, eq=False)
class MixturePrior:
    candidates: tuple[Trajectory, ...]
    weights: np.ndarray
    temperature: float
    scores: np.ndarray
    source_indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        w = np.array(self.weights, float)
        if len(self.candidates) < 1 or w.shape != (len(self.candidates),):
            raise ValueError("mixture needs one weight per candidate")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        w.setflags(write=False)
        s = np.array(self.scores, float)
        s.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "candidates", tuple(self.candidates))

    def __len__(self):
        return len(self.candidates)


def build_mixture(paths: Sequence[Trajectory], field: SuccessField, temperature: float = DEFAULT_TEMPERATURE,
                  M: int = DEFAULT_M, n_waypoints: int = DEFAULT_WAYPOINTS,
                  weights: ScoreWeights = ScoreWeights()) -> MixturePrior:
    """Resample, pick a diverse subset, score it and softmax-normalize."""
    if not paths:
        raise ValueError("cannot build a mixture from an empty path set")
    resampled = [p.resample(n_waypoints) for p in paths]
    keep = select_diverse(resampled, M, n_waypoints)
    chosen = [resampled[i] for i in keep]
    scores = np.array([score_candidate(t, field, weights) for t in chosen])
    return MixturePrior(tuple(chosen), softmax_weights(scores, temperature), temperature, scores, tuple(keep))


def sample_prior(prior: MixturePrior, rng) -> Trajectory:
    """Categorical draw over components; ``rng`` is a seed or a numpy Generator."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    i = int(rng.choice(len(prior.candidates), p=prior.weights))
    return prior.candidates[i].copy()


def field_peaks(field: SuccessField, threshold: float = 0.8) -> np.ndarray:
    """Cells that are 8-neighborhood maxima of the clamped field above ``threshold``."""
    F = field.clamped
    peak = (F == ndimage.maximum_filter(F, size=3, mode="nearest")) & (F > threshold)
    return np.argwhere(peak)


def peaks_prior(field: SuccessField, start, goal, n_waypoints: int = DEFAULT_WAYPOINTS,
                threshold: float = 0.8) -> Trajectory:
    """Single path through field peaks, joined by straight segments.

    Peaks whose projection on the start-goal segment falls strictly inside
    it are visited in order of that projection.
    """
    start = np.asarray(start, float)
    goal = np.asarray(goal, float)
    cells = field_peaks(field, threshold)
    pts = (cells[:, ::-1] + 0.5) * field.resolution
    d = goal - start
    denom = float(d @ d) or 1.0
    proj = (pts - start) @ d / denom
    inside = (proj > 0) & (proj < 1)
    order = np.lexsort((cells[inside][:, 1], cells[inside][:, 0], proj[inside]))
    poly = np.vstack([start, pts[inside][order], goal])
    return Trajectory(poly).resample(n_waypoints)


def format_mixture_csv(prior: MixturePrior) -> str:
    buf = io.StringIO()
    buf.write("component,weight,score\n")
    for m, (w, s) in enumerate(zip(prior.weights, prior.scores)):
        buf.write(f"{m},{float(w)!r},{float(s)!r}\n")
    buf.write(f"\ntemperature\n{float(prior.temperature)!r}\n\ncomponent,k,x,y\n")
    for m, t in enumerate(prior.candidates):
        for k, (x, y) in enumerate(t.waypoints):
            buf.write(f"{m},{k},{float(x)!r},{float(y)!r}\n")
    return buf.getvalue()


def write_mixture_csv(prior: MixturePrior, path) -> None:
    Path(path).write_text(format_mixture_csv(prior))


def parse_mixture_csv(text: str) -> MixturePrior:
    blocks = [b.strip().splitlines() for b in text.strip().split("\n\n") if b.strip()]
    if len(blocks) != 3 or blocks[0][0].replace(" ", "") != "component,weight,score":
        raise ValueError("mixture file must have weight, temperature and waypoint blocks")
    weights, scores = [], []
    for ln in blocks[0][1:]:
        _, w, s = ln.split(",")
        weights.append(float(w))
        scores.append(float(s))
    temperature = float(blocks[1][1])
    comps: dict[int, list[str]] = {}
    for ln in blocks[2][1:]:
        m, rest = ln.split(",", 1)
        comps.setdefault(int(m), []).append(rest)
    candidates = tuple(parse_trajectory_csv("k,x,y\n" + "\n".join(comps[m])) for m in sorted(comps))
    return MixturePrior(candidates, np.array(weights), temperature, np.array(scores))


def read_mixture_csv(path) -> MixturePrior:
    return parse_mixture_csv(Path(path).read_text())
