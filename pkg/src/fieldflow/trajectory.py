"""Waypoint trajectories with pinned endpoints, plus their CSV format."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ENDPOINT_TOL = 1e-9


@dataclass(frozen=True)
class Trajectory:
    """Ordered (K, 2) waypoints in meters. First/last rows are the endpoints."""

    waypoints: np.ndarray

    def __post_init__(self):
        w = np.array(self.waypoints, dtype=float, copy=True)
        if w.ndim != 2 or w.shape[1] != 2:
            raise ValueError(f"waypoints must have shape (K, 2), got {w.shape}")
        if w.shape[0] < 2:
            raise ValueError("a trajectory needs at least 2 waypoints")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite waypoint")
        w.setflags(write=False)
        object.__setattr__(self, "waypoints", w)

    @classmethod
    def between(cls, start, goal, n: int) -> "Trajectory":
        """Straight line from start to goal with n evenly spaced waypoints."""
        s = np.linspace(0.0, 1.0, n)[:, None]
        return cls((1 - s) * np.asarray(start, float) + s * np.asarray(goal, float))

    def __len__(self) -> int:
        return self.waypoints.shape[0]

    @property
    def start(self) -> np.ndarray:
        return self.waypoints[0]

    @property
    def goal(self) -> np.ndarray:
        return self.waypoints[-1]

    def copy(self) -> "Trajectory":
        return Trajectory(self.waypoints.copy())

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())

    def with_endpoints(self, start, goal) -> "Trajectory":
        w = self.waypoints.copy()
        w[0] = start
        w[-1] = goal
        return Trajectory(w)

    def check_endpoints(self, start, goal) -> bool:
        return bool(
            np.linalg.norm(self.waypoints[0] - np.asarray(start)) <= ENDPOINT_TOL
            and np.linalg.norm(self.waypoints[-1] - np.asarray(goal)) <= ENDPOINT_TOL
        )

    def resample(self, n: int) -> "Trajectory":
        return Trajectory(resample_polyline(self.waypoints, n))


def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """Resample a polyline to n points evenly spaced in arc length.

    Endpoints are copied exactly. A degenerate (zero-length) polyline
    yields n copies of its first point.
    """
    points = np.asarray(points, dtype=float)
    if n < 2:
        raise ValueError("need at least 2 samples")
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0.0:
        return np.repeat(points[:1], n, axis=0)
    targets = np.linspace(0.0, total, n)
    out = np.column_stack([np.interp(targets, s, points[:, 0]), np.interp(targets, s, points[:, 1])])
    out[0] = points[0]
    out[-1] = points[-1]
    return out


def write_trajectory_csv(traj: Trajectory, path) -> None:
    Path(path).write_text(format_trajectory_csv(traj))


def format_trajectory_csv(traj: Trajectory) -> str:
    buf = io.StringIO()
    buf.write("k,x,y\n")
    for k, (x, y) in enumerate(traj.waypoints):
        buf.write(f"{k},{float(x)!r},{float(y)!r}\n")
    return buf.getvalue()


def parse_trajectory_csv(text: str) -> Trajectory:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "k,x,y":
        raise ValueError("trajectory file must start with header 'k,x,y'")
    rows = []
    for ln in lines[1:]:
        k, x, y = ln.split(",")
        rows.append((int(k), float(x), float(y)))
    rows.sort(key=lambda r: r[0])
    if [r[0] for r in rows] != list(range(len(rows))):
        raise ValueError("waypoint indices must be 0..K-1")
    return Trajectory(np.array([[r[1], r[2]] for r in rows]))


def read_trajectory_csv(path) -> Trajectory:
    return parse_trajectory_csv(Path(path).read_text())
