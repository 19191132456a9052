from __future__ import annotations

from collections import deque

import numpy as np
import pytest
from _oracles import dense_flows, random_grid

from gridcascade import fixtures
from gridcascade.dcflow import (
    DCSolver,
    PathError,
    UnbalancedError,
    conservation_residual,
    path_sum,
    phase_residual,
    solve,
)
from gridcascade.gridcore import Grid, Line


def _grids(n=100, seed=7):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield random_grid(rng, int(rng.integers(2, 51)), int(rng.integers(0, 30)))


def _tree_path(grid: Grid, start: int, goal: int, allowed: np.ndarray):
    """Node/line alternating path from start to goal through allowed lines (BFS)."""
    adj = {i: [] for i in range(grid.n_nodes)}
    for k in np.flatnonzero(allowed):
        a, b = int(grid.src[k]), int(grid.dst[k])
        adj[a].append((k, b))
        adj[b].append((k, a))
    prev = {start: None}
    q = deque([start])
    while q:
        v = q.popleft()
        for k, w in adj[v]:
            if w not in prev:
                prev[w] = (v, k)
                q.append(w)
    out = [goal]
    while prev[out[-1]] is not None:
        v, k = prev[out[-1]]
        out += [k, v]
    return out[::-1]


def test_conservation_and_ohm_on_random_grids():
    for g in _grids():
        inj = g.injection()
        sol = solve(g, None, inj)
        assert np.abs(conservation_residual(g, sol, inj)).max() <= 1e-9
        assert np.abs(phase_residual(g, sol)).max() <= 1e-9


def test_matches_dense_pseudoinverse():
    for g in _grids(30, seed=3):
        alive = np.ones(g.n_lines, dtype=bool)
        np.testing.assert_allclose(solve(g, alive, g.injection()).flow, dense_flows(g, alive, g.injection()), atol=1e-9)


def test_path_sum_law_on_random_grids():
    for g in _grids():
        sol = solve(g, None, g.injection())
        n_tree = g.n_nodes - 1
        tree = np.zeros(g.n_lines, dtype=bool)
        tree[:n_tree] = True
        for k in range(n_tree, g.n_lines):
            # two routes between a chord's ends carry the same f*x
            a, b = int(g.src[k]), int(g.dst[k])
            via_tree = path_sum(sol, g, _tree_path(g, a, b, tree))
            direct = path_sum(sol, g, [a, k, b])
            assert abs(via_tree - direct) <= 1e-9


def test_reference_node_invariance():
    rng = np.random.default_rng(11)
    for g in _grids(20, seed=5):
        inj = g.injection()
        ref_flow = solve(g, None, inj).flow
        n = g.n_nodes
        L = np.zeros((n, n))
        for k in range(g.n_lines):
            a, b, w = g.src[k], g.dst[k], 1 / g.reactance[k]
            L[[a, b], [a, b]] += w
            L[a, b] -= w
            L[b, a] -= w
        pin = int(rng.integers(n))
        keep = np.arange(n) != pin
        theta = np.zeros(n)
        theta[keep] = np.linalg.solve(L[np.ix_(keep, keep)], inj[keep])
        f = (theta[g.src] - theta[g.dst]) / g.reactance
        np.testing.assert_allclose(f, ref_flow, atol=1e-9)


def test_reactance_scale_invariance_and_linearity():
    rng = np.random.default_rng(2)
    for g in _grids(20, seed=9):
        inj = g.injection()
        f = solve(g, None, inj).flow
        c = float(rng.uniform(0.1, 10))
        scaled = Grid(g.nodes, tuple(Line(l.id, l.src, l.dst, c * l.reactance) for l in g.lines))
        np.testing.assert_allclose(solve(scaled, None, inj).flow, f, atol=1e-9)
        other = rng.normal(size=g.n_nodes)
        other -= other.mean()
        f2 = solve(g, None, other).flow
        np.testing.assert_allclose(solve(g, None, inj + 2 * other).flow, f + 2 * f2, atol=1e-9)


def test_islands_solved_independently():
    g = fixtures.make_mring(3)
    alive = g.alive_mask(removed=fixtures.tie_lines(3))
    sol = solve(g, alive, g.injection())
    assert sol.n_components == 3
    np.testing.assert_allclose(np.abs(sol.flow[alive]), 0.5, atol=1e-12)
    assert np.all(sol.flow[~alive] == 0)


def test_unbalanced_island_rejected():
    g = fixtures.make_mring(2)
    alive = g.alive_mask(removed=fixtures.area_failure(2, 0))
    with pytest.raises(UnbalancedError, match="component"):
        solve(g, alive, g.injection())


def test_solver_reuses_factorization():
    g = fixtures.make_qgraph(5)
    s = DCSolver(g, cache_size=2)
    alive = np.ones(g.n_lines, dtype=bool)
    s.solve(alive, g.injection())
    s.solve(alive, 2 * g.injection())
    assert len(s._cache) == 1
    for k in range(3):
        a = alive.copy()
        a[k] = False
        s.solve(a, g.injection())
    assert len(s._cache) == 2


def test_path_errors():
    g = fixtures.make_mring(2)
    sol = solve(g, None, g.injection())
    with pytest.raises(PathError):
        path_sum(sol, g, [0, 0])
    with pytest.raises(PathError, match="does not join"):
        path_sum(sol, g, [0, 0, 5])
    dead = solve(g, g.alive_mask(removed={0}), g.injection())
    with pytest.raises(PathError, match="not in service"):
        path_sum(dead, g, [0, 0, 2])


def test_flow_orientation_sign():
    g = fixtures.make_mring(2)
    f = solve(g, None, g.injection()).flow
    # supply is the source of every internal line, so flows are positive
    internal = [k for k in range(10) if k % 5 != 4]
    assert np.all(f[internal] > 0)
