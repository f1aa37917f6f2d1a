"""Closed-form temporal projection of feature sequences.

A (T, D) feature history is pulled toward three targets at once: the raw
features, a temporally smooth sequence, and a velocity-weighted context
vector. The minimizer of that quadratic has a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg


@dataclass(frozen=True)
class RefinedFeatures:
    Z_tilde: np.ndarray
    z_c: np.ndarray
    w: np.ndarray


def _as_features(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] < 1:
        raise ValueError(f"feature sequence must be a non-empty (T, D) matrix, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("feature sequence contains non-finite entries")
    return Z


def temporal_laplacian(T: int) -> np.ndarray:
    """Second-difference operator with one-sided (Neumann) end rows."""
    if T < 1:
        raise ValueError("T must be >= 1")
    L = np.zeros((T, T))
    if T == 1:
        return L
    idx = np.arange(T)
    L[idx, idx] = 2.0
    L[idx[:-1], idx[1:]] = -1.0
    L[idx[1:], idx[:-1]] = -1.0
    L[0, 0] = L[-1, -1] = 1.0
    return L


def feature_velocity(Z: np.ndarray) -> np.ndarray:
    """v_t = ||z_t - z_{t-1}||, with v_1 = 0."""
    v = np.zeros(Z.shape[0])
    v[1:] = np.linalg.norm(np.diff(Z, axis=0), axis=1)
    return v


def context_vector(Z, velocity=feature_velocity, goal=None) -> tuple[np.ndarray, np.ndarray]:
    """Softmax-of-velocity weighted average of the frames.

    ``velocity`` maps the (T, D) matrix to per-frame scores. If ``goal`` is
    given, it is appended as an extra frame before weighting.
    """
    Z = _as_features(Z)
    if goal is not None:
        Z = np.vstack([Z, np.asarray(goal, dtype=float).reshape(1, -1)])
    v = np.asarray(velocity(Z), dtype=float)
    e = np.exp(v - v.max())
    w = e / e.sum()
    return w @ Z, w


def projection_objective(Zp, Z, z_c, L=None) -> float:
    Zp = np.asarray(Zp, float)
    if L is None:
        L = temporal_laplacian(Z.shape[0])
    return float(np.sum((Zp - Z) ** 2) + np.sum((L @ Zp) ** 2) + np.sum((Zp - z_c[None, :]) ** 2))


def refine(Z, velocity=feature_velocity, goal=None) -> RefinedFeatures:
    """Solve (2I + L^T L) Z~ = Z + 1 z_c^T for the smoothed features.

    z_c is computed from the raw input and held fixed during the solve.
    """
    Z = _as_features(Z)
    z_c, w = context_vector(Z, velocity, goal)
    L = temporal_laplacian(Z.shape[0])
    A = 2.0 * np.eye(Z.shape[0]) + L.T @ L
    Zt = linalg.cho_solve(linalg.cho_factor(A), Z + z_c[None, :])
    return RefinedFeatures(Zt, z_c, w)


def scene_descriptor(occupied: np.ndarray, cells: int = 8) -> np.ndarray:
    """Occupied fraction of each block of a ``cells`` x ``cells`` partition, flattened."""
    occ = np.asarray(occupied, float)
    rows = np.array_split(np.arange(occ.shape[0]), cells)
    cols = np.array_split(np.arange(occ.shape[1]), cells)
    return np.array([occ[np.ix_(r, c)].mean() for r in rows for c in cols])


def synthetic_features(start, goal, extent, rng: np.random.Generator, T: int = 8,
                       step: float = 0.05, noise: float = 0.02, scene=None) -> np.ndarray:
    """Stand-in encoder output: a short approach history ending at ``start``.

    Frame t holds the normalized position and the normalized goal offset,
    then the optional ``scene`` descriptor, all with per-entry Gaussian noise.
    """
    start = np.asarray(start, float)
    goal = np.asarray(goal, float)
    scale = float(max(extent))
    d = goal - start
    heading = d / (np.linalg.norm(d) or 1.0)
    ang = rng.normal(0.0, 0.3)
    c, s = np.cos(ang), np.sin(ang)
    heading = np.array([c * heading[0] - s * heading[1], s * heading[0] + c * heading[1]])
    back = np.arange(T - 1, -1, -1)[:, None] * step
    pos = start[None, :] - back * heading[None, :]
    Z = np.hstack([pos / scale, (goal[None, :] - pos) / scale])
    if scene is not None:
        Z = np.hstack([Z, np.tile(np.asarray(scene, float).ravel(), (T, 1))])
    return Z + rng.normal(0.0, noise, Z.shape)


def write_features_csv(Z, path) -> None:
    Z = _as_features(Z)
    lines = ["T,D", f"{Z.shape[0]},{Z.shape[1]}"]
    lines += [",".join(repr(float(v)) for v in row) for row in Z]
    Path(path).write_text("\n".join(lines) + "\n")


def read_features_csv(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if lines[0].replace(" ", "") != "T,D":
        raise ValueError("feature file must start with header 'T,D'")
    T, D = (int(v) for v in lines[1].split(","))
    Z = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:]])
    if Z.shape != (T, D):
        raise ValueError(f"feature body has shape {Z.shape}, header says {(T, D)}")
    return _as_features(Z)
