from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from _oracles import lp_vertex_optimum

from gridcascade import control, fixtures, lp
from gridcascade.cascade import CascadeConfig, CascadeState, run
from gridcascade.dcflow import conservation_residual, phase_residual, solve
from gridcascade.gridcore import DEMAND, NEUTRAL, SUPPLY, Grid, Line, Node


def snapshot_of(grid, mavg, demand=None, supply=None, alive=None):
    alive = np.ones(grid.n_lines, dtype=bool) if alive is None else alive
    st = CascadeState(
        alive,
        grid.demand.copy() if demand is None else np.asarray(demand, float),
        grid.supply.copy() if supply is None else np.asarray(supply, float),
        np.where(alive, np.asarray(mavg, float), np.nan),
        0,
    )
    return control.ControlSnapshot.from_state(grid, st)


def one_line(u=0.5, D=1.0):
    return Grid((Node(0, SUPPLY, D), Node(1, DEMAND, D, 1.0, 0.0)), (Line(0, 0, 1, 1.0, u),))


def parallel_pair(u1, u2, D=1.0):
    return Grid((Node(0, SUPPLY, D), Node(1, DEMAND, D, 1.0, 0.0)),
                (Line(0, 0, 1, 1.0, u1), Line(1, 0, 1, 2.0, u2)))


def short_chain(u1, u2, d1, d2):
    return Grid(
        (Node(0, SUPPLY, d1 + d2), Node(1, DEMAND, d1, 1.0, 0.0), Node(2, DEMAND, d2, 2.0, 0.0)),
        (Line(0, 0, 1, 1.0, u1), Line(1, 1, 2, 1.5, u2)),
    )


def crafted():
    """Four parallel lines; the weak one trips first and drags the rest down."""
    caps = [0.9, 0.9, 0.9, 0.55]
    return Grid((Node(0, SUPPLY, 2.0), Node(1, DEMAND, 2.0, 1.0, 0.0)),
                tuple(Line(k, 0, 1, 1.0, u) for k, u in enumerate(caps)))


# ---------------------------------------------------------------------------
# Hand-solvable instances
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("backend", ["simplex", "highs"])
def test_single_line_hand_solution(backend):
    g = one_line()
    clp = control.build_lp(snapshot_of(g, [1.0]), g, alpha=1.0, epsilon=0.0)
    assert clp.lp.n_vars == 7
    sol = control.solve_lp(clp, backend)
    assert sol.shed[1] == pytest.approx(0.5, abs=1e-7)
    assert sol.lambda_[0] == pytest.approx(0.5, abs=1e-7)
    assert sol.flow[0] == pytest.approx(0.5, abs=1e-7)
    assert sol.objective == pytest.approx(lp_vertex_optimum(clp.lp), abs=1e-6)


def test_nothing_to_do_when_already_safe():
    g = one_line(u=2.0)
    sol = control.solve_lp(control.build_lp(snapshot_of(g, [1.0]), g))
    assert sol.objective == 0.0
    assert sol.yield_ == 1.0


def test_zero_capacity_forces_full_shed():
    g = one_line(u=0.0)
    sol = control.solve_lp(control.build_lp(snapshot_of(g, [0.0]), g))
    assert sol.shed[1] == pytest.approx(1.0, abs=1e-9)
    assert sol.lambda_[0] == pytest.approx(1.0, abs=1e-9)
    assert sol.flow[0] == pytest.approx(0.0, abs=1e-9)


def test_island_without_generation_sheds_everything():
    g = short_chain(3.0, 3.0, 1.0, 1.0)
    alive = np.array([True, False])
    sol = control.solve_lp(control.build_lp(snapshot_of(g, [2.0, 1.0], alive=alive), g))
    assert sol.shed[2] == pytest.approx(1.0)
    assert sol.shed[1] == pytest.approx(0.0, abs=1e-9)


def test_homogeneity():
    g = short_chain(0.8, 0.3, 1.0, 0.7)
    mavg = np.array([1.2, 0.5])
    base = control.solve_lp(control.build_lp(snapshot_of(g, mavg), g, alpha=0.6)).objective
    g2 = short_chain(1.6, 0.6, 2.0, 1.4)
    doubled = control.solve_lp(control.build_lp(snapshot_of(g2, 2 * mavg), g2, alpha=0.6)).objective
    assert base > 0
    assert doubled == pytest.approx(2 * base, abs=1e-9)


def test_full_shed_bound():
    rng = np.random.default_rng(1)
    for _ in range(20):
        u1, u2 = rng.uniform(0.05, 1.0, 2)
        alpha = float(rng.uniform(0.3, 0.99))
        # decayed averages within capacity, so zero flow is admissible
        mavg = rng.uniform(0, 1, 2) * np.array([u1, u2]) / (1 - alpha)
        g = short_chain(u1, u2, 1.0, 1.0)
        sol = control.solve_lp(control.build_lp(snapshot_of(g, mavg), g, alpha=alpha))
        assert sol.objective <= 2.0 + 1e-9


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def _random_small(rng):
    if rng.random() < 0.5:
        u1, u2 = rng.uniform(0.0, 1.2, 2)
        g = parallel_pair(u1, u2, float(rng.uniform(0.5, 2)))
    else:
        g = short_chain(*rng.uniform(0.0, 1.5, 2), *rng.uniform(0.2, 1.0, 2))
    mavg = rng.uniform(0, 1.5, g.n_lines)
    alpha = float(rng.choice([0.3, 0.7, 1.0]))
    eps = float(rng.choice([0.0, 0.1]))
    return g, mavg, alpha, eps


def test_simplex_matches_vertex_enumeration():
    rng = np.random.default_rng(12)
    solved = infeasible = 0
    for _ in range(25):
        g, mavg, alpha, eps = _random_small(rng)
        clp = control.build_lp(snapshot_of(g, mavg), g, alpha=alpha, epsilon=eps)
        assert clp.lp.n_vars <= 12
        best = lp_vertex_optimum(clp.lp)
        for backend in ("simplex", "highs"):
            if np.isinf(best):
                with pytest.raises(control.ControlInfeasible):
                    control.solve_lp(clp, backend)
            else:
                assert control.solve_lp(clp, backend).objective == pytest.approx(best, abs=1e-6)
        if np.isinf(best):
            infeasible += 1
        else:
            solved += 1
    assert solved >= 10 and infeasible >= 1


def test_solution_obeys_flow_physics_and_bounds():
    g = fixtures.make_qgraph(4)
    snaps, _ = control.snapshots(g, {0}, CascadeConfig(), [1, 2, 3])
    for snap in snaps.values():
        clp = control.build_lp(snap, g)
        sol = control.solve_lp(clp)
        assert max(sol.residuals.values()) <= 1e-7
        inj = sol.generation - (snap.demand - sol.shed)
        dc = solve(g, snap.alive, inj)
        assert np.abs(conservation_residual(g, dc, inj)).max() <= 1e-7
        np.testing.assert_allclose(sol.flow, dc.flow, atol=1e-7)
        assert np.all(sol.shed >= 0) and np.all(sol.shed <= snap.demand)
        assert np.all((sol.lambda_ >= 0) & (sol.lambda_ <= 1))
        assert np.abs(phase_residual(g, dc)).max() <= 1e-9


def _random_lp(rng, n=6, m_ub=5, m_eq=2):
    x0 = rng.uniform(0, 1, n)
    A_ub = rng.normal(size=(m_ub, n))
    b_ub = A_ub @ x0 + rng.uniform(0, 1, m_ub)
    A_eq = rng.normal(size=(m_eq, n))
    A_eq = np.vstack([A_eq, A_eq.sum(0)])  # redundant row
    b_eq = A_eq @ x0
    lb = np.where(rng.random(n) < 0.3, -np.inf, -1.0)
    ub = np.where(rng.random(n) < 0.3, np.inf, 2.0)
    c = rng.normal(size=n)
    return lp.LinearProgram(c, sp.csr_matrix(A_ub), b_ub, sp.csr_matrix(A_eq), b_eq, lb, ub)


def test_simplex_agrees_with_highs_on_random_lps():
    rng = np.random.default_rng(0)
    agree = 0
    for _ in range(40):
        prog = _random_lp(rng)
        try:
            ref = lp.highs(prog)
        except lp.LPUnbounded:
            with pytest.raises(lp.LPUnbounded):
                lp.simplex(prog)
            continue
        got = lp.simplex(prog)
        assert got.objective == pytest.approx(ref.objective, abs=1e-7)
        assert max(prog.residuals(got.x).values()) <= 1e-7
        agree += 1
    assert agree >= 20


def test_lp_backend_selection():
    g = one_line()
    clp = control.build_lp(snapshot_of(g, [1.0]), g)
    assert lp.solve(clp.lp).backend == "simplex"
    with pytest.raises(ValueError):
        lp.solve(clp.lp, "cplex")


def test_build_lp_rejects_bad_parameters():
    g = one_line()
    with pytest.raises(ValueError):
        control.build_lp(snapshot_of(g, [1.0]), g, alpha=0.0)
    with pytest.raises(ValueError):
        control.build_lp(snapshot_of(g, [1.0]), g, epsilon=1.0)
    with pytest.raises(control.ControlError):
        control.build_lp(snapshot_of(g, [1.0]), Grid(g.nodes, (Line(0, 0, 1, 1.0),)))


# ---------------------------------------------------------------------------
# Round sweeps
# ---------------------------------------------------------------------------


def test_crafted_fixture_has_interior_optimum():
    g = crafted()
    rep = run(g, {2})
    assert rep.rounds_to_stability == 3 and rep.yield_ == 0.0
    out = control.control_sweep(g, {2}, CascadeConfig(), [1, 2, 3])
    ys = [o.yield_ for o in out]
    assert all(o.status == "stable" for o in out)
    np.testing.assert_allclose(ys, [0.825, 0.9, 0.0], atol=1e-9)
    assert ys[1] > ys[0] and ys[1] > ys[2]


def test_qgraph_control_anchors():
    g = fixtures.make_qgraph(4)
    for backend in ("simplex", "highs"):
        out = control.control_sweep(g, {0}, CascadeConfig(), [1, 2, 3, 4], backend=backend)
        assert [o.status for o in out] == ["stable"] * 4
        np.testing.assert_allclose([o.yield_ for o in out], [0.875, 0.75, 0.5, 0.0], atol=1e-9)
        assert all(o.lines_removed_after == 0 for o in out)


def test_round_zero_without_failure_is_full_yield():
    (o,) = control.control_sweep(fixtures.make_mring(4, capacity=0.5), set(), CascadeConfig(), [0])
    assert o.yield_ == 1.0 and o.status == "stable"


def test_round_zero_aliases_round_one():
    g = crafted()
    a, b = control.control_sweep(g, {2}, CascadeConfig(), [0, 1])
    assert a.yield_ == b.yield_ and a.round == 0 and b.round == 1


def test_rounds_past_the_cascade_rejected():
    with pytest.raises(ValueError, match="past the uncontrolled cascade"):
        control.control_sweep(crafted(), {2}, CascadeConfig(), [4])
    with pytest.raises(ValueError):
        control.control_sweep(crafted(), {2}, CascadeConfig(), [-1])


def test_infeasible_round_recorded_and_sweep_continues():
    # island A idles inside the band at 0.95 u; island B loses its weak line in round 1.
    # With alpha = 0.1 the decayed average 0.855 u already exceeds (1 - eps) u = 0.8 u.
    g = Grid(
        (Node(0, SUPPLY, 1.9), Node(1, DEMAND, 1.9, 1, 0), Node(2, SUPPLY, 1.0, 0, 5), Node(3, DEMAND, 1.0, 1, 5)),
        (Line(0, 0, 1, 1.0, 1.0), Line(1, 0, 1, 1.0, 1.0), Line(2, 2, 3, 1.0, 1.0), Line(3, 2, 3, 9.0, 0.1)),
    )
    cfg = CascadeConfig(alpha=0.1, epsilon=0.2, p=0.0)
    assert run(g, {2}, cfg).faulted_lines_by_round == [{2}, {3}, set()]
    out = control.control_sweep(g, {2}, cfg, [1, 2])
    assert [o.status for o in out] == ["infeasible", "infeasible"]
    assert all(o.yield_ is None for o in out)
    assert control.outcomes_csv(out).splitlines() == ["Round,Yield,status", "1,,infeasible", "2,,infeasible"]
    # a looser control margin makes the same rounds solvable
    relaxed = control.control_sweep(g, {2}, cfg, [1, 2], epsilon=0.0)
    assert [o.status for o in relaxed] == ["stable", "stable"]
    assert relaxed[1].yield_ == pytest.approx(1.9 / 2.9)


def test_control_epsilon_is_independent():
    g = crafted()
    loose = control.control_sweep(g, {2}, CascadeConfig(), [2])[0]
    tight = control.control_sweep(g, {2}, CascadeConfig(), [2], epsilon=0.1)[0]
    assert tight.status == "stable"
    assert tight.yield_ < loose.yield_


def test_parallel_sweep_matches_serial():
    g = fixtures.make_qgraph(5)
    a = control.control_sweep(g, {0}, CascadeConfig(), [1, 2, 3, 4, 5])
    b = control.control_sweep(g, {0}, CascadeConfig(), [1, 2, 3, 4, 5], jobs=3)
    assert a == b


def test_snapshot_round_numbering():
    g = crafted()
    snaps, length = control.snapshots(g, {2}, CascadeConfig(), [1, 2, 3])
    assert length == 3
    assert snaps[1].alive.tolist() == [True, True, False, True]
    assert snaps[2].alive.tolist() == [True, True, False, False]
    assert not snaps[3].alive.any()
    assert snaps[2].mavg[0] == pytest.approx(2 / 3)


def test_neutral_nodes_carry_no_variables():
    g = Grid((Node(0, SUPPLY, 1.0), Node(1, NEUTRAL, 0.0, 1, 0), Node(2, DEMAND, 1.0, 2, 0)),
             (Line(0, 0, 1, 1.0, 0.6), Line(1, 1, 2, 1.0, 0.6)))
    clp = control.build_lp(snapshot_of(g, [1.0, 1.0]), g)
    assert clp.demand_nodes.tolist() == [2] and clp.supply_nodes.tolist() == [0]
    sol = control.solve_lp(clp)
    assert sol.shed[2] == pytest.approx(0.4)
