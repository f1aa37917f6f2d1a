"""Structured multi-modal trajectory priors extracted from a success field."""

from __future__ import annotations

from ..env import OccupancyGrid
from ..field import SuccessField
from ..trajectory import Trajectory
from .energy import DEFAULT_DELTA, EnergyGraph, build_energy_graph, path_energy
from .ksp import k_shortest_paths, path_cost
from .mixture import (DEFAULT_K, DEFAULT_M, DEFAULT_TEMPERATURE, DEFAULT_WAYPOINTS, MixturePrior, ScoreWeights,
                      build_mixture, field_peaks, hausdorff, peaks_prior, read_mixture_csv, sample_prior,
                      score_candidate, select_diverse, softmax_weights, write_mixture_csv)


def candidate_paths(field: SuccessField, grid: OccupancyGrid, start, goal, K: int = DEFAULT_K,
                    delta: float = DEFAULT_DELTA, graph: EnergyGraph | None = None) -> list[Trajectory]:
    """K lowest-energy graph paths from start to goal as metric trajectories."""
    if graph is None:
        graph = build_energy_graph(field, grid, delta)
    s = graph.node_of(grid.cell_of(start))
    g = graph.node_of(grid.cell_of(goal))
    if s == g:
        return [Trajectory([start, goal])]
    found = k_shortest_paths(graph, s, g, K)
    return [Trajectory(graph.path_points(nodes, start, goal)) for _, nodes in found]


def extract_prior(field: SuccessField, grid: OccupancyGrid, start, goal, K: int = DEFAULT_K, M: int = DEFAULT_M,
                  temperature: float = DEFAULT_TEMPERATURE, delta: float = DEFAULT_DELTA,
                  n_waypoints: int = DEFAULT_WAYPOINTS, weights: ScoreWeights = ScoreWeights()) -> MixturePrior:
    paths = candidate_paths(field, grid, start, goal, K, delta)
    if not paths:
        raise ValueError("start and goal are disconnected in the energy graph")
    return build_mixture(paths, field, temperature, M, n_waypoints, weights)


__all__ = [
    "DEFAULT_DELTA", "DEFAULT_K", "DEFAULT_M", "DEFAULT_TEMPERATURE", "DEFAULT_WAYPOINTS",
    "EnergyGraph", "MixturePrior", "ScoreWeights", "build_energy_graph", "build_mixture", "candidate_paths",
    "extract_prior", "field_peaks", "hausdorff", "k_shortest_paths", "path_cost", "path_energy", "peaks_prior",
    "read_mixture_csv", "sample_prior", "score_candidate", "select_diverse", "softmax_weights",
    "write_mixture_csv",
]
