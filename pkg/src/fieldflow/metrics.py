"""Episode execution and the SR / SPL / collision / minimum-snap metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .env import OccupancyGrid, Scenario, shortest_path_length
from .trajectory import Trajectory

SUCCESS_RADIUS = 0.2
MAX_STEPS = 500
STEP_LENGTH = 0.05
NOMINAL_SPEED = 0.5


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    executed_path_length: float
    shortest_path_length: float
    collided: bool
    steps_taken: int
    trajectory: Trajectory
    terminal_distance: float = 0.0
    snap: float = 0.0
    seed: int = 0
    kind: str = ""

    def __post_init__(self):
        if self.executed_path_length < 0:
            raise ValueError("executed path length must be non-negative")
        if self.shortest_path_length <= 0:
            raise ValueError("shortest path length must be positive")

    @property
    def spl(self) -> float:
        if not self.success:
            return 0.0
        return self.shortest_path_length / max(self.executed_path_length, self.shortest_path_length)

    def record(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "success": bool(self.success),
            "collided": bool(self.collided),
            "steps": int(self.steps_taken),
            "P": float(self.executed_path_length),
            "L": float(self.shortest_path_length),
            "spl": float(self.spl),
            "terminal_distance": float(self.terminal_distance),
            "snap": float(self.snap),
            "waypoints": self.trajectory.waypoints.tolist(),
        }


def spl(episodes: Sequence[EpisodeResult]) -> float:
    """Mean of S_i * L_i / max(P_i, L_i)."""
    if not episodes:
        raise ValueError("no episodes")
    for e in episodes:
        if e.shortest_path_length <= 0:
            raise ValueError("shortest path length must be positive")
    return float(np.mean([e.spl for e in episodes]))


def minimum_snap(tau, dt: float) -> float:
    """Integral of squared snap (m^2/s^7) for waypoints spaced ``dt`` seconds apart.

    Central fourth differences / dt^4 are computed at interior nodes and
    held constant out to the two nodes at each end; the squared magnitude
    is integrated over all K-1 intervals with the rectangle rule.
    """
    x = tau.waypoints if isinstance(tau, Trajectory) else np.asarray(tau, float)
    if x.shape[0] < 5:
        raise ValueError("minimum snap needs at least 5 waypoints")
    if dt <= 0:
        raise ValueError("dt must be positive")
    d4 = (x[4:] - 4 * x[3:-1] + 6 * x[2:-2] - 4 * x[1:-3] + x[:-4]) / dt ** 4
    sq = np.sum(d4 ** 2, axis=1)
    sq = np.pad(sq, 2, mode="edge")
    return float(np.sum(sq[:-1]) * dt)


def snap_time_step(tau: Trajectory, speed: float = NOMINAL_SPEED) -> float:
    """Uniform timing: total length over (K-1) segments at a nominal speed."""
    length = tau.length()
    return max(length, 1e-9) / (len(tau) - 1) / speed


def point_in_collision(grid: OccupancyGrid, p) -> bool:
    """True if ``p`` lies in the open interior of an occupied cell or off the grid.

    Points exactly on cell boundaries touch walls without entering them.
    """
    q = np.asarray(p, float) / grid.resolution
    h, w = grid.shape
    if not (0.0 <= q[0] <= w and 0.0 <= q[1] <= h):
        return True
    if np.any(q == np.floor(q)):
        return False
    return bool(grid.cells[int(q[1]), int(q[0])])


def segment_collision(grid: OccupancyGrid, a, b) -> float | None:
    """Fraction along segment a->b where it first enters an occupied cell, else None.

    Exact: the segment is split at every grid-line crossing and each piece
    is tested against the cell it lies in, so any point sampled on the
    segment for which ``point_in_collision`` holds is also reported here.
    """
    res = grid.resolution
    a = np.asarray(a, float) / res
    b = np.asarray(b, float) / res
    d = b - a
    if not np.any(d):
        return 0.0 if point_in_collision(grid, a * res) else None
    ts = [0.0, 1.0]
    for axis in (0, 1):
        if d[axis] != 0.0:
            lo, hi = sorted((a[axis], b[axis]))
            ks = np.arange(math.ceil(lo), math.floor(hi) + 1)
            ts.extend(((ks - a[axis]) / d[axis]).tolist())
    ts = np.unique(np.clip(ts, 0.0, 1.0))
    h, w = grid.shape
    for t0, t1 in zip(ts[:-1], ts[1:]):
        if t1 <= t0:
            continue
        p = a + 0.5 * (t0 + t1) * d
        if np.any(p == np.floor(p)):
            continue  # the piece runs along a grid line
        col, row = int(math.floor(p[0])), int(math.floor(p[1]))
        if not (0 <= row < h and 0 <= col < w) or grid.cells[row, col]:
            return float(t0)
    return None


def trajectory_collides(grid: OccupancyGrid, points) -> bool:
    pts = np.asarray(points, float)
    return any(segment_collision(grid, a, b) is not None for a, b in zip(pts[:-1], pts[1:]))


def execute(grid: OccupancyGrid, points: np.ndarray, max_length: float) -> tuple[np.ndarray, float, bool]:
    """Follow the polyline until it ends, hits an obstacle, or runs out of budget.

    Returns (final position, executed length, collided).
    """
    travelled = 0.0
    pos = points[0]
    for a, b in zip(points[:-1], points[1:]):
        seg = float(np.linalg.norm(b - a))
        hit = segment_collision(grid, a, b)
        stop = 1.0 if hit is None else hit
        if seg > 0 and travelled + stop * seg > max_length:
            frac = (max_length - travelled) / seg
            return a + frac * (b - a), max_length, False
        travelled += stop * seg
        pos = a + stop * (b - a)
        if hit is not None:
            return pos, travelled, True
    return pos, travelled, False


def evaluate_episode(scenario: Scenario, trajectory: Trajectory, distances=None, *,
                     step_length: float = STEP_LENGTH, max_steps: int = MAX_STEPS,
                     success_radius: float = SUCCESS_RADIUS, nominal_speed: float = NOMINAL_SPEED,
                     shortest_length: float | None = None) -> EpisodeResult:
    """Run a point follower along the waypoints at a fixed step length.

    ``distances`` is accepted for interface symmetry; collisions are checked
    exactly against the occupancy grid.
    """
    pts = trajectory.waypoints
    end, travelled, collided = execute(scenario.grid, pts, step_length * max_steps)
    steps = int(math.ceil(travelled / step_length - 1e-9))
    terminal = float(np.linalg.norm(end - scenario.goal))
    success = (not collided) and steps <= max_steps and terminal <= success_radius
    L = shortest_path_length(scenario) if shortest_length is None else shortest_length
    snap = minimum_snap(trajectory, snap_time_step(trajectory, nominal_speed)) if len(trajectory) >= 5 else 0.0
    return EpisodeResult(success, travelled, L, collided, steps, trajectory, terminal, snap,
                         scenario.seed, scenario.kind.value)


@dataclass(frozen=True)
class MetricsReport:
    sr: float
    spl: float
    collision_rate: float
    ms: float
    n_episodes: int
    sr_std: float
    spl_std: float
    collision_std: float
    ms_std: float
    records: tuple = ()

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d


def _std(x) -> float:
    x = np.asarray(x, float)
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def aggregate(episodes: Sequence[EpisodeResult], ms_successes_only: bool = False) -> MetricsReport:
    """Means and sample standard deviations; records keep input order."""
    if not episodes:
        raise ValueError("cannot aggregate an empty episode list")
    s = np.array([100.0 * e.success for e in episodes])
    c = np.array([100.0 * e.collided for e in episodes])
    p = np.array([e.spl for e in episodes])
    snaps = [e.snap for e in episodes if e.success or not ms_successes_only]
    m = np.array(snaps) if snaps else np.zeros(1)
    return MetricsReport(float(s.mean()), float(p.mean()), float(c.mean()), float(m.mean()), len(episodes),
                         _std(s), _std(p), _std(c), _std(m), tuple(e.record() for e in episodes))


SUMMARY_COLUMNS = ["SR", "SR_std", "SPL", "SPL_std", "Coll.", "Coll._std", "MS", "MS_std", "episodes"]


def summary_row(report: MetricsReport) -> dict:
    return {
        "SR": report.sr, "SR_std": report.sr_std, "SPL": report.spl, "SPL_std": report.spl_std,
        "Coll.": report.collision_rate, "Coll._std": report.collision_std, "MS": report.ms,
        "MS_std": report.ms_std, "episodes": report.n_episodes,
    }


def format_summary_csv(rows: Sequence[dict], leading: Sequence[str] = ()) -> str:
    cols = list(leading) + [c for c in rows[0] if c not in leading] if rows else list(leading)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def format_records_jsonl(records: Sequence[dict], extra: dict | None = None) -> str:
    lines = []
    for r in records:
        row = dict(extra or {})
        row.update(r)
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")
