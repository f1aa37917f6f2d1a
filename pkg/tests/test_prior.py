import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from fieldflow import env
from fieldflow.env import OccupancyGrid
from fieldflow.field import SuccessField, query_points, solve_field
from fieldflow.prior import (MixturePrior, ScoreWeights, build_energy_graph, build_mixture, candidate_paths,
                             extract_prior, hausdorff, k_shortest_paths, path_cost, path_energy, peaks_prior,
                             read_mixture_csv, sample_prior, score_candidate, select_diverse, softmax_weights,
                             write_mixture_csv)
from fieldflow.trajectory import Trajectory


def uniform_field(h, w, c, res=0.1):
    return SuccessField(np.full((h, w), c), 1.0, 0.05, res)


def open_grid(h, w, res=0.1):
    return OccupancyGrid(np.zeros((h, w), np.uint8), res, closed=False)


# ---------------------------------------------------------------- path energy

def test_energy_straight_uniform():
    f = uniform_field(20, 20, 0.5)
    e = path_energy(Trajectory([[0.5, 0.5], [1.5, 0.5]]), f, 0.01)
    assert e == pytest.approx(-math.log(0.51), rel=1e-12)
    assert path_energy(Trajectory([[0.5, 0.5], [0.5, 0.5]]), f, 0.01) == 0.0


def smooth_random_field(rng, n=20):
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) * 0.1
    F = 0.5 + sum(rng.uniform(-0.1, 0.1) * np.sin(rng.uniform(-3, 3) * xx + rng.uniform(-3, 3) * yy
                                                  + rng.uniform(0, 6)) for _ in range(4))
    return SuccessField(F, 1.0, 0.05, 0.1)


@pytest.mark.parametrize("seed", range(20))
def test_energy_matches_dense_quadrature(seed):
    rng = np.random.default_rng(seed)
    f = smooth_random_field(rng)
    pts = np.clip(np.vstack([[1, 1], 1 + np.cumsum(rng.normal(0, 0.1, (9, 2)), axis=0)]), 0.05, 1.95)
    cum = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    s = (np.arange(10000) + 0.5) / 10000 * cum[-1]
    xy = np.column_stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])])
    ref = np.mean(-np.log(query_points(f, xy) + 1e-3)) * cum[-1]
    assert path_energy(Trajectory(pts), f) == pytest.approx(ref, rel=0.02)


# ---------------------------------------------------------------- graph

def boxed_grid(h, w, res=0.1):
    """Closed 8x8-or-larger grid whose free interior is exactly h x w."""
    cells = np.ones((max(h + 2, 8), max(w + 2, 8)), np.uint8)
    cells[1:h + 1, 1:w + 1] = 0
    return OccupancyGrid(cells, res)


def test_uniform_edge_weights():
    c, delta = 0.7, 1e-3
    grid = boxed_grid(6, 6)
    g = build_energy_graph(uniform_field(*grid.shape, c), grid, delta)
    m = g.matrix.tocoo()
    ax = -math.log(c + delta) * 0.1
    for a, b, v in zip(m.row, m.col, m.data):
        diag = np.abs(g.cells[a] - g.cells[b]).sum() == 2
        assert v == pytest.approx(ax * (math.sqrt(2) if diag else 1.0), rel=1e-12)


def simple_paths(adj, s, t):
    out = []

    def walk(node, seen, path):
        if node == t:
            out.append(tuple(path))
            return
        for nxt in adj[node]:
            if nxt not in seen:
                seen.add(nxt)
                walk(nxt, seen, path + [nxt])
                seen.remove(nxt)
    walk(s, {s}, [s])
    return out


def floyd_warshall(m):
    d = np.where(m > 0, m, np.inf)
    np.fill_diagonal(d, 0.0)
    for k in range(len(d)):
        d = np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :])
    return d


def test_shortest_on_uniform_6x6_is_octile():
    c, delta = 0.5, 1e-3
    grid = boxed_grid(6, 6)
    g = build_energy_graph(uniform_field(*grid.shape, c), grid, delta)
    dist = floyd_warshall(g.matrix.toarray())
    unit = -math.log(c + delta) * 0.1
    for a, b in itertools.combinations(range(g.n_nodes), 2):
        dr, dc = np.abs(g.cells[a] - g.cells[b])
        octile = (max(dr, dc) - min(dr, dc) + math.sqrt(2) * min(dr, dc)) * unit
        assert dist[a, b] == pytest.approx(octile, rel=1e-12)
    s, t = g.node_of((1, 1)), g.node_of((6, 4))
    assert k_shortest_paths(g, s, t, 1)[0][0] == pytest.approx((3 * math.sqrt(2) + 2) * unit, rel=1e-12)


def test_shortest_matches_path_enumeration():
    # full enumeration of simple paths is only tractable on a narrow strip
    rng = np.random.default_rng(1)
    grid = boxed_grid(2, 6)
    f = SuccessField(rng.random(grid.shape), 1.0, 0.05, 0.1)
    g = build_energy_graph(f, grid)
    adj = {i: list(g.matrix.indices[g.matrix.indptr[i]:g.matrix.indptr[i + 1]]) for i in range(g.n_nodes)}
    paths = simple_paths(adj, 0, g.n_nodes - 1)
    ref = sorted((path_cost(g.matrix, p), p) for p in paths)[:8]
    got = k_shortest_paths(g, 0, g.n_nodes - 1, 8)
    assert [p for _, p in got] == [p for _, p in ref]
    assert np.allclose([c for c, _ in got], [c for c, _ in ref], rtol=1e-12)


def test_corner_cutting_edges_dropped():
    cells = np.zeros((8, 8), np.uint8)
    cells[3, 4] = 1
    grid = OccupancyGrid(cells, 0.1, closed=False)
    g = build_energy_graph(uniform_field(8, 8, 0.5), grid)
    a, b = g.node_of((3, 3)), g.node_of((2, 4))
    assert g.matrix[a, b] == 0
    g2 = build_energy_graph(uniform_field(8, 8, 0.5), grid, corner_cutting=True)
    assert g2.matrix[a, b] > 0


# ---------------------------------------------------------------- K shortest

def test_unique_path_graph():
    m = sp.csr_matrix(([1.0, 1.0, 2.0, 2.0], ([0, 1, 1, 2], [1, 0, 2, 1])), shape=(3, 3))
    for K in (1, 3, 8):
        assert k_shortest_paths(m, 0, 2, K) == [(3.0, (0, 1, 2))]


def test_diamond():
    e = [(0, 1, 1), (1, 3, 1), (0, 2, 2), (2, 3, 2)]
    rows = [a for a, b, _ in e] + [b for a, b, _ in e]
    cols = [b for a, b, _ in e] + [a for a, b, _ in e]
    w = [c for *_, c in e] * 2
    m = sp.csr_matrix((w, (rows, cols)), shape=(4, 4))
    assert k_shortest_paths(m, 0, 3, 5) == [(2.0, (0, 1, 3)), (4.0, (0, 2, 3))]


def test_unreachable_target():
    m = sp.csr_matrix(([1.0, 1.0], ([0, 1], [1, 0])), shape=(3, 3))
    assert k_shortest_paths(m, 0, 2, 3) == []


def random_graph(rng, n):
    w = np.zeros((n, n))
    for a, b in itertools.combinations(range(n), 2):
        if rng.random() < 0.45:
            w[a, b] = w[b, a] = rng.integers(1, 10) if rng.random() < 0.5 else rng.uniform(0.1, 5)
    return w


def enumerate_k_shortest(w, s, t, K):
    adj = {i: list(np.nonzero(w[i])[0]) for i in range(len(w))}
    paths = simple_paths(adj, s, t)
    costed = sorted((float(sum(w[a, b] for a, b in zip(p[:-1], p[1:]))), p) for p in paths)
    return costed[:K]


def test_yen_matches_enumeration_on_random_graphs():
    rng = np.random.default_rng(2)
    for trial in range(50):
        n = int(rng.integers(3, 11))
        w = random_graph(rng, n)
        K = int(rng.integers(1, 9))
        got = k_shortest_paths(sp.csr_matrix(w), 0, n - 1, K)
        ref = enumerate_k_shortest(w, 0, n - 1, K)
        assert len(got) == len(ref)
        assert np.allclose([c for c, _ in got], [c for c, _ in ref], rtol=1e-12)
        # identical path sets once ties in cost are allowed to reorder
        if ref:
            cutoff = ref[-1][0]
            strict = {p for c, p in ref if c < cutoff - 1e-9}
            assert strict <= {p for _, p in got}
            all_paths = {p for c, p in enumerate_k_shortest(w, 0, n - 1, 10**6) if abs(c - cutoff) <= 1e-9}
            assert {p for c, p in got if abs(c - cutoff) <= 1e-9} <= all_paths


@given(st.integers(0, 2**31 - 1))
def test_yen_paths_are_simple_sorted_and_costed(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    w = random_graph(rng, n)
    m = sp.csr_matrix(w)
    got = k_shortest_paths(m, 0, n - 1, 6)
    costs = [c for c, _ in got]
    assert costs == sorted(costs)
    assert len({p for _, p in got}) == len(got)
    for c, p in got:
        assert len(set(p)) == len(p) and p[0] == 0 and p[-1] == n - 1
        assert c == pytest.approx(path_cost(m, p))


def test_tjunction_candidates_cover_both_passages():
    s = env.generate_scenario("TJunction", 7, 64)
    f = solve_field(env.synthesize_demonstrations(s, 20, 0.5, 0), s.grid)
    paths = candidate_paths(f, s.grid, s.start, s.goal, 8)
    classes = {env.corridor_class(s, p.waypoints) for p in paths}
    assert {1, 2} <= classes


# ---------------------------------------------------------------- selection

def line(y, n=16):
    return Trajectory.between([0.1, y], [1.9, y], n)


def test_identical_candidates_collapse():
    assert select_diverse([line(0.5)] * 4, 3) == [0]


def test_exhaustion_returns_all_distinct():
    paths = [line(0.2), line(0.5), line(0.9)]
    assert sorted(select_diverse(paths, 5)) == [0, 1, 2]


def test_two_corridors_pick_one_each():
    paths = [line(0.40), line(0.42), line(1.50), line(0.45), line(1.52), line(0.41)]
    chosen = select_diverse(paths, 2)
    reps = [p.resample(16).waypoints for p in paths]
    best = max(itertools.combinations(range(6), 2), key=lambda ij: hausdorff(reps[ij[0]], reps[ij[1]]))
    pair_best = hausdorff(reps[best[0]], reps[best[1]])
    assert hausdorff(reps[chosen[0]], reps[chosen[1]]) == pytest.approx(pair_best)
    assert {paths[i].waypoints[5, 1] > 1.0 for i in chosen} == {True, False}


@given(st.lists(st.floats(0.1, 1.9), min_size=1, max_size=8), st.integers(1, 5))
def test_selection_properties(ys, M):
    paths = [line(y) for y in ys]
    chosen = select_diverse(paths, M)
    assert chosen[0] == 0
    assert len(chosen) == len(set(chosen)) <= M
    reps = [p.waypoints for p in paths]
    for a, b in itertools.combinations(chosen, 2):
        assert hausdorff(reps[a], reps[b]) > 0


def test_hausdorff_brute_force():
    rng = np.random.default_rng(3)
    a, b = rng.random((7, 2)), rng.random((5, 2))
    ref = max(max(min(np.linalg.norm(p - q) for q in b) for p in a),
              max(min(np.linalg.norm(p - q) for p in a) for q in b))
    assert hausdorff(a, b) == pytest.approx(ref, rel=1e-14)


# ---------------------------------------------------------------- scoring

def test_score_unit_cases():
    f1 = uniform_field(20, 20, 1.0)
    tau = line(1.0)
    assert score_candidate(tau, f1, ScoreWeights(2.5, 0.0, 0.0)) == pytest.approx(2.5)
    lo = uniform_field(20, 20, 0.3)
    assert score_candidate(tau, f1, ScoreWeights(1, 0, 0)) > score_candidate(tau, lo, ScoreWeights(1, 0, 0))


def test_right_angle_scores_below_straight():
    f = uniform_field(30, 30, 0.8)
    n = 17
    straight = Trajectory.between([0.5, 1.5], [2.1, 1.5], n)
    leg = np.linspace(0, 0.8, 9)
    bent = Trajectory(np.vstack([np.column_stack([0.5 + leg, np.full(9, 1.5)]),
                                 np.column_stack([np.full(8, 1.3), 1.5 + leg[1:]])]))
    assert straight.length() == pytest.approx(bent.length())
    w = ScoreWeights(1.0, 0.1, 0.05)
    from fieldflow.prior.mixture import turning_curvature
    k_bent = turning_curvature(bent.waypoints)
    assert np.sum(k_bent ** 2) == pytest.approx((math.pi / 2 / 0.1) ** 2)
    assert np.sum(turning_curvature(straight.waypoints) ** 2) == pytest.approx(0.0, abs=1e-20)
    assert score_candidate(straight, f, w) > score_candidate(bent, f, w)


# ---------------------------------------------------------------- softmax / sampling

def test_softmax_cases():
    assert np.allclose(softmax_weights([0.3, 0.3], 0.5), [0.5, 0.5])
    assert np.allclose(softmax_weights([5.0, -3.0, 1.0], 1e9), 1 / 3, atol=1e-6)
    assert softmax_weights([1.0, 0.0], 1.0)[0] == pytest.approx(math.e / (math.e + 1), abs=1e-15)
    with pytest.raises(ValueError):
        softmax_weights([1.0], 0.0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(0.05, 10), st.floats(-100, 100))
def test_softmax_ratio_and_shift(scores, T, shift):
    w = softmax_weights(scores, T)
    assert w.sum() == pytest.approx(1.0)
    assert np.abs(softmax_weights(np.array(scores) + shift, T) - w).max() <= 1e-12
    gap = (scores[0] - scores[1]) / T
    if abs(gap) < 30:  # both weights well above underflow
        assert w[0] / w[1] == pytest.approx(math.exp(gap), rel=1e-9)


def two_component(p):
    return MixturePrior((line(0.4), line(1.2)), np.array([p, 1 - p]), 1.0, np.array([1.0, 0.0]))


def test_sampling_frequency():
    prior = two_component(math.e / (math.e + 1))
    rng = np.random.default_rng(4)
    hits = sum(sample_prior(prior, rng).waypoints[3, 1] < 1.0 for _ in range(100_000))
    assert abs(hits / 100_000 - prior.weights[0]) <= 0.01


def test_sampling_degenerate_and_deterministic():
    single = MixturePrior((line(0.4),), np.array([1.0]), 1.0, np.array([0.0]))
    assert all(np.array_equal(sample_prior(single, s).waypoints, line(0.4).waypoints) for s in range(20))
    prior = two_component(0.5)
    assert [sample_prior(prior, 9).waypoints[3, 1] for _ in range(3)] == [sample_prior(prior, 9).waypoints[3, 1]] * 3


def test_mixture_validation():
    with pytest.raises(ValueError):
        MixturePrior((line(0.4), line(1.2)), np.array([0.5, 0.6]), 1.0, np.zeros(2))
    with pytest.raises(ValueError):
        build_mixture([], uniform_field(8, 8, 0.5))


def test_extract_prior_and_file_round_trip(tmp_path):
    s = env.generate_scenario("TJunction", 3, 48)
    f = solve_field(env.synthesize_demonstrations(s, 20, 0.5, 0), s.grid)
    prior = extract_prior(f, s.grid, s.start, s.goal)
    assert 1 <= len(prior) <= 3
    for c in prior.candidates:
        assert len(c) == 16 and c.check_endpoints(s.start, s.goal)
    write_mixture_csv(prior, tmp_path / "m.csv")
    back = read_mixture_csv(tmp_path / "m.csv")
    assert np.array_equal(back.weights, prior.weights)
    assert all(np.array_equal(a.waypoints, b.waypoints) for a, b in zip(back.candidates, prior.candidates))


def test_peaks_prior_pins_endpoints():
    s = env.generate_scenario("Corridor", 3, 48)
    f = solve_field(env.synthesize_demonstrations(s, 20, 0.5, 0), s.grid)
    tau = peaks_prior(f, s.start, s.goal, 16)
    assert len(tau) == 16 and tau.check_endpoints(s.start, s.goal)
