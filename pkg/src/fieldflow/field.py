"""Success-probability field from demonstration labels.

The field minimizes a discrete fidelity + gradient + squared-Laplacian
energy. Its stationarity condition is the sparse SPD system

    (I + mu L + nu L^2) F = y

on free cells, with ``L`` the unit-spacing 5-point graph Laplacian
(positive semidefinite, Neumann at the outer border) and occupied cells
pinned to F = 0. Weights mu and nu are therefore in cell units.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .env import LabelField, OccupancyGrid
from .interp import bilinear

DEFAULT_MU = 1.0
DEFAULT_NU = 0.05


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class SuccessField:
    values: np.ndarray  # raw solve, may overshoot [0, 1] slightly
    mu: float
    nu: float
    resolution: float
    residual: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    @property
    def clamped(self) -> np.ndarray:
        return np.clip(self.values, 0.0, 1.0)


def grid_laplacian(shape) -> sp.csr_matrix:
    """Unit-spacing 4-neighbor graph Laplacian D - A over all cells (row-major)."""
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    pairs = [(idx[:, :-1].ravel(), idx[:, 1:].ravel()), (idx[:-1, :].ravel(), idx[1:, :].ravel())]
    rows = np.concatenate([p[0] for p in pairs] + [p[1] for p in pairs])
    cols = np.concatenate([p[1] for p in pairs] + [p[0] for p in pairs])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(h * w, h * w))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(deg) - adj).tocsr()


def system_matrix(shape, mu: float, nu: float) -> sp.csr_matrix:
    L = grid_laplacian(shape)
    n = L.shape[0]
    return (sp.identity(n, format="csr") + mu * L + nu * (L @ L)).tocsr()


def conjugate_gradient(A: sp.csr_matrix, b: np.ndarray, tol: float, max_iter: int):
    """Jacobi-preconditioned CG; stops on the infinity-norm residual."""
    x = np.zeros_like(b)
    inv_diag = 1.0 / A.diagonal()
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    res = float(np.abs(r).max()) if r.size else 0.0
    it = 0
    while res > tol and it < max_iter:
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        if it % 50 == 0:
            r = b - A @ x  # refresh against drift
        res = float(np.abs(r).max())
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, res, it


def solve_field(labels, grid: OccupancyGrid, mu: float = DEFAULT_MU, nu: float = DEFAULT_NU,
                solver: str = "cg", tol: float = 1e-10, max_iter: int | None = None) -> SuccessField:
    """Minimize the field energy for labels ``y`` with obstacles pinned to zero."""
    if mu < 0 or nu < 0:
        raise ValueError("mu and nu must be non-negative")
    y = labels.values if isinstance(labels, LabelField) else np.asarray(labels, dtype=float)
    if y.shape != grid.shape:
        raise ValueError(f"label shape {y.shape} does not match grid {grid.shape}")
    free = grid.free.ravel()
    F = np.zeros(y.size)
    A = system_matrix(grid.shape, mu, nu)
    Aff = A[free][:, free].tocsr()
    b = y.ravel()[free]
    if b.size == 0:
        return SuccessField(F.reshape(grid.shape), mu, nu, grid.resolution)
    if solver == "cg":
        if max_iter is None:
            max_iter = 20 * b.size + 100
        x, res, it = conjugate_gradient(Aff, b, tol, max_iter)
        if res > tol:
            raise SolverError("conjugate gradient did not converge", res, it)
    elif solver == "direct":
        x = spsolve(Aff.tocsc(), b)
        res = float(np.abs(Aff @ x - b).max())
        it = 0
    else:
        raise ValueError(f"unknown solver {solver!r}")
    F[free] = x
    return SuccessField(F.reshape(grid.shape), mu, nu, grid.resolution, res, it)


def stationarity_residual(field: SuccessField, labels, grid: OccupancyGrid) -> float:
    """Max-norm residual of the linear system on free cells."""
    y = labels.values if isinstance(labels, LabelField) else np.asarray(labels, float)
    r = system_matrix(grid.shape, field.mu, field.nu) @ field.values.ravel() - y.ravel()
    return float(np.abs(r[grid.free.ravel()]).max()) if grid.free.any() else 0.0


def query_field(field: SuccessField, p) -> float:
    """Bilinear value at a metric point, clamped to [0, 1]."""
    p = np.asarray(p, dtype=float)
    h, w = field.shape
    if not (0.0 <= p[0] <= w * field.resolution and 0.0 <= p[1] <= h * field.resolution):
        raise ValueError(f"point {tuple(p)} outside the field")
    return float(np.clip(bilinear(field.values, field.resolution, p), 0.0, 1.0))


def query_points(field: SuccessField, points) -> np.ndarray:
    """Vectorized clamped bilinear lookup; out-of-bounds points are clamped to the border."""
    return np.clip(bilinear(field.values, field.resolution, np.asarray(points, float)), 0.0, 1.0)


def field_energy(field, labels, mu: float | None = None, nu: float | None = None) -> float:
    """sum (F - y)^2 + mu * sum_edges (dF)^2 + nu * sum (L F)^2, unit cell area.

    ``field`` may be a SuccessField (weights default to its own) or a raw array.
    """
    F = field.values if isinstance(field, SuccessField) else np.asarray(field, float)
    if mu is None:
        mu = field.mu
    if nu is None:
        nu = field.nu
    y = labels.values if isinstance(labels, LabelField) else np.asarray(labels, float)
    if F.shape != y.shape:
        raise ValueError("field and labels must share a shape")
    grad = np.sum(np.diff(F, axis=0) ** 2) + np.sum(np.diff(F, axis=1) ** 2)
    lap = grid_laplacian(F.shape) @ F.ravel()
    return float(np.sum((F - y) ** 2) + mu * grad + nu * np.sum(lap ** 2))


def total_variation(F: np.ndarray) -> float:
    return float(np.abs(np.diff(F, axis=0)).sum() + np.abs(np.diff(F, axis=1)).sum())


class LinearFieldHead:
    """Ridge regression from per-cell features to labels.

    Exercises the feature-conditioned path: per-cell inputs are the cell's
    normalized coordinates, its clearance and the context vector. The
    prediction can be fed to :func:`solve_field` in place of raw labels.
    """

    def __init__(self, ridge: float = 1e-3):
        self.ridge = ridge
        self.coef: np.ndarray | None = None

    @staticmethod
    def cell_features(grid: OccupancyGrid, z_c, distances: np.ndarray) -> np.ndarray:
        h, w = grid.shape
        rr, cc = np.mgrid[0:h, 0:w]
        z = np.broadcast_to(np.asarray(z_c, float), (h * w, len(z_c)))
        cols = [np.ones(h * w), (cc.ravel() + 0.5) / w, (rr.ravel() + 0.5) / h,
                np.minimum(distances.ravel(), 1.0)]
        return np.column_stack(cols + [z])

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LinearFieldHead":
        A = X.T @ X + self.ridge * np.eye(X.shape[1])
        self.coef = np.linalg.solve(A, X.T @ y)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.coef is None:
            raise RuntimeError("head is not fitted")
        return np.clip(X @ self.coef, 0.0, 1.0)


def write_field_csv(field: SuccessField, path) -> None:
    h, w = field.shape
    lines = ["width,height,resolution,mu,nu", f"{w},{h},{float(field.resolution)!r},{float(field.mu)!r},{float(field.nu)!r}"]
    lines += [",".join(repr(float(v)) for v in row) for row in field.values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_field_csv(path) -> SuccessField:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines[0].replace(" ", "").startswith("width,height,resolution"):
        raise ValueError("field csv must start with header 'width,height,resolution,...'")
    head = lines[1].split(",")
    w, h, res = int(head[0]), int(head[1]), float(head[2])
    mu = float(head[3]) if len(head) > 3 else DEFAULT_MU
    nu = float(head[4]) if len(head) > 4 else DEFAULT_NU
    values = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:]])
    if values.shape != (h, w):
        raise ValueError("field csv body does not match header")
    return SuccessField(values, mu, nu, res)


def write_field_pgm(field: SuccessField, path) -> None:
    """16-bit binary greymap of the clamped field (0 -> 0, 1 -> 65535)."""
    h, w = field.shape
    img = np.round(field.clamped * 65535).astype(">u2")
    header = f"P5\n# resolution {field.resolution!r}\n{w} {h}\n65535\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.tobytes())
