"""Yen's loopless K-shortest paths over a weighted CSR graph."""

from __future__ import annotations

import heapq

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .energy import EnergyGraph


def _as_csr(graph) -> sp.csr_matrix:
    m = graph.matrix if isinstance(graph, EnergyGraph) else graph
    m = sp.csr_matrix(m)
    m.sort_indices()
    return m


def _edge_keys(m: sp.csr_matrix) -> np.ndarray:
    """Sorted key row * n + col for every stored entry (CSR order)."""
    rows = np.repeat(np.arange(m.shape[0], dtype=np.int64), np.diff(m.indptr))
    return rows * m.shape[1] + m.indices.astype(np.int64)


def _edge_slots(m: sp.csr_matrix, keys: np.ndarray, a, b) -> np.ndarray:
    q = np.asarray(a, np.int64) * m.shape[1] + np.asarray(b, np.int64)
    j = np.searchsorted(keys, q)
    if np.any(j >= keys.size) or np.any(keys[np.minimum(j, keys.size - 1)] != q):
        raise ValueError("path uses a missing edge")
    return j


def path_cost(graph, path, keys: np.ndarray | None = None) -> float:
    """Sum of edge weights along ``path``, accumulated in path order."""
    m = graph if keys is not None else _as_csr(graph)
    if keys is None:
        keys = _edge_keys(m)
    if len(path) < 2:
        return 0.0
    p = np.asarray(path)
    total = 0.0
    for v in m.data[_edge_slots(m, keys, p[:-1], p[1:])]:
        total += float(v)
    return total


def _shortest(m: sp.csr_matrix, data: np.ndarray, source: int, target: int, limit: float = np.inf):
    g = sp.csr_matrix((data, m.indices, m.indptr), shape=m.shape)
    dist, pred = dijkstra(g, directed=True, indices=source, return_predecessors=True, limit=limit)
    if not np.isfinite(dist[target]):
        return None
    path = [target]
    while path[-1] != source:
        path.append(int(pred[path[-1]]))
    return path[::-1]


def k_shortest_paths(graph, source: int, target: int, K: int) -> list[tuple[float, tuple[int, ...]]]:
    """Up to K simple paths as ``(cost, nodes)`` sorted by cost, then node sequence.

    Returns an empty list when target is unreachable. Edge weights must be
    non-negative; removed edges are masked with +inf for each spur search.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if source == target:
        raise ValueError("source and target must differ")
    m = _as_csr(graph)
    base = m.data.astype(float)
    keys = _edge_keys(m)
    row_of = keys // m.shape[1]
    first = _shortest(m, base, source, target)
    if first is None:
        return []
    accepted: list[tuple[float, tuple[int, ...]]] = [(path_cost(m, first, keys), tuple(first))]
    seen = {accepted[0][1]}
    candidates: list[tuple[float, tuple[int, ...]]] = []
    while len(accepted) < K:
        prev = accepted[-1][1]
        prefix = np.concatenate([[0.0], np.cumsum(m.data[_edge_slots(m, keys, prev[:-1], prev[1:])])])
        for i in range(len(prev) - 1):
            spur = prev[i]
            root = prev[: i + 1]
            data = base.copy()
            for _, p in accepted:
                if len(p) > i + 1 and p[: i + 1] == root:
                    data[_edge_slots(m, keys, p[i], p[i + 1])] = np.inf
            if i > 0:
                blocked = np.zeros(m.shape[0], dtype=bool)
                blocked[list(root[:-1])] = True
                data[blocked[row_of] | blocked[m.indices]] = np.inf
            # a spur path costlier than `need` queued candidates can never be accepted
            need = K - len(accepted)
            limit = np.inf
            if len(candidates) >= need:
                bound = heapq.nsmallest(need, candidates)[-1][0]
                limit = bound - prefix[i] + 1e-9 * max(1.0, abs(bound))
            tail = _shortest(m, data, spur, target, limit)
            if tail is None:
                continue
            path = root[:-1] + tuple(tail)
            if path in seen:
                continue
            seen.add(path)
            heapq.heappush(candidates, (path_cost(m, path, keys), path))
        if not candidates:
            break
        accepted.append(heapq.heappop(candidates))
    return sorted(accepted)
