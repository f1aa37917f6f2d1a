"""Path energy over a success field and its grid-graph discretization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..env import OccupancyGrid
from ..field import SuccessField, query_points
from ..trajectory import Trajectory

DEFAULT_DELTA = 1e-3
# per-meter cost floor; keeps edge weights positive where F + delta > 1
COST_FLOOR = 1e-6


def path_energy(tau, field: SuccessField, delta: float = DEFAULT_DELTA) -> float:
    """Trapezoidal sum of -log(F + delta) times segment length."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    pts = tau.waypoints if isinstance(tau, Trajectory) else np.asarray(tau, float)
    c = -np.log(query_points(field, pts) + delta)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return float(np.sum(0.5 * (c[:-1] + c[1:]) * seg))


@dataclass(frozen=True, eq=False)
class EnergyGraph:
    """Undirected 8-connected graph over free cells, stored as a CSR matrix."""

    matrix: sp.csr_matrix
    cells: np.ndarray  # (n, 2) row/col of each node
    positions: np.ndarray  # (n, 2) metric cell centers
    index: np.ndarray  # grid-shaped node id, -1 on occupied cells

    @property
    def n_nodes(self) -> int:
        return self.cells.shape[0]

    def node_of(self, cell) -> int:
        i = int(self.index[tuple(cell)])
        if i < 0:
            raise ValueError(f"cell {tuple(cell)} is not a free node")
        return i

    def path_points(self, nodes, start=None, goal=None) -> np.ndarray:
        pts = self.positions[list(nodes)].copy()
        if start is not None:
            pts[0] = start
        if goal is not None:
            pts[-1] = goal
        return pts


def node_costs(field: SuccessField, delta: float = DEFAULT_DELTA) -> np.ndarray:
    return np.maximum(-np.log(field.clamped + delta), COST_FLOOR)


def build_energy_graph(field: SuccessField, grid: OccupancyGrid, delta: float = DEFAULT_DELTA,
                       corner_cutting: bool = False) -> EnergyGraph:
    """Edge weight = mean endpoint cost times metric edge length.

    Diagonal edges squeezing between two occupied cells are dropped unless
    ``corner_cutting`` is set.
    """
    if field.shape != grid.shape:
        raise ValueError("field and grid shapes differ")
    free = grid.free
    if not free.any():
        raise ValueError("grid has no free cells")
    h, w = grid.shape
    index = -np.ones((h, w), dtype=np.int64)
    cells = np.argwhere(free)
    index[free] = np.arange(cells.shape[0])
    cost = node_costs(field, delta)
    res = grid.resolution
    rows, cols, data = [], [], []
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        r0 = slice(max(0, -dr), h - max(0, dr))
        c0 = slice(max(0, -dc), w - max(0, dc))
        r1 = slice(max(0, dr), h - max(0, -dr) if dr < 0 else h)
        c1 = slice(max(0, dc), w + min(0, dc))
        a_free = free[r0, c0]
        b_free = free[r1, c1]
        ok = a_free & b_free
        if dr and dc and not corner_cutting:
            side1 = free[r1, c0]   # (r+dr, c)
            side2 = free[r0, c1]   # (r, c+dc)
            ok &= side1 & side2
        a = index[r0, c0][ok]
        b = index[r1, c1][ok]
        length = res * (math.sqrt(2.0) if dr and dc else 1.0)
        wgt = 0.5 * (cost[r0, c0][ok] + cost[r1, c1][ok]) * length
        rows += [a, b]
        cols += [b, a]
        data += [wgt, wgt]
    n = cells.shape[0]
    matrix = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    matrix.sort_indices()
    positions = (cells[:, ::-1] + 0.5) * res
    return EnergyGraph(matrix, cells, positions, index)
