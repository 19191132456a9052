"""One-shot optimal demand-shedding control at a chosen cascade round.

Just before round ``t`` the operator may shed demand ``s_i`` at each demand
node and scale every generator in an island by the same factor
``1 - lambda``.  The linear program picks the least total shedding whose
resulting DC flow keeps every moving average at or below ``(1-eps)u`` after
the round's update, so the cascade stops there.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import lp as lpmod
from .cascade import CascadeConfig, CascadeState, iterate, make_rng, step
from .dcflow import DCSolver
from .gridcore import Grid, component_labels

log = logging.getLogger(__name__)

BOUND_TOL = 1e-7


class ControlError(RuntimeError):
    pass


class ControlInfeasible(ControlError):
    """No shedding plan satisfies the rules at this round."""


@dataclass(frozen=True, eq=False)
class ControlSnapshot:
    round: int
    alive: np.ndarray
    mavg: np.ndarray  # NaN on dead lines
    demand: np.ndarray
    supply: np.ndarray
    labels: np.ndarray
    n_components: int
    original_demand: float

    @classmethod
    def from_state(cls, grid: Grid, state: CascadeState, original_demand: float | None = None) -> ControlSnapshot:
        """Snapshot of ``state``, which holds the values just before round ``state.round + 1``."""
        ncomp, labels = component_labels(grid, state.alive)
        return cls(
            round=state.round + 1,
            alive=state.alive.copy(),
            mavg=state.mavg.copy(),
            demand=np.asarray(state.demand, dtype=float).copy(),
            supply=np.asarray(state.supply, dtype=float).copy(),
            labels=labels,
            n_components=ncomp,
            original_demand=float(grid.demand.sum() if original_demand is None else original_demand),
        )


@dataclass(frozen=True, eq=False)
class ControlLP:
    """A built LP plus the maps from its variables back to the grid."""

    lp: lpmod.LinearProgram
    snapshot: ControlSnapshot
    demand_nodes: np.ndarray
    supply_nodes: np.ndarray
    lines: np.ndarray
    n_nodes: int

    @property
    def slices(self) -> dict[str, slice]:
        nd, ns, nl = self.demand_nodes.size, self.supply_nodes.size, self.lines.size
        nn, nc = self.n_nodes, self.snapshot.n_components
        edges = np.cumsum([0, nd, nl, nn, nc, ns, nl])
        names = ("s", "f", "theta", "lambda", "P", "F")
        return {k: slice(int(edges[i]), int(edges[i + 1])) for i, k in enumerate(names)}


@dataclass(frozen=True, eq=False)
class ControlSolution:
    round: int
    shed: np.ndarray  # per node, zero off the demand set
    lambda_: np.ndarray  # per component
    flow: np.ndarray  # per line, zero on dead lines
    phase: np.ndarray
    generation: np.ndarray  # per node
    objective: float
    served_demand: float
    yield_: float
    backend: str
    residuals: dict


def build_lp(snapshot: ControlSnapshot, grid: Grid, capacities=None, alpha: float = 1.0, epsilon: float = 0.0) -> ControlLP:
    """Variables are ordered ``s, f, theta, lambda, P, F``.

    Only alive lines get flow variables; only nodes with positive demand
    (supply) get ``s`` (``P``) variables.  The smallest node of each island
    has its phase pinned to zero.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if not (0.0 <= epsilon < 1.0):
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    u = grid.capacity if capacities is None else np.asarray(capacities, dtype=float)
    if np.isnan(u).any():
        raise ControlError("every line needs a capacity")
    n = grid.n_nodes
    D, P = snapshot.demand, snapshot.supply
    labels, nc = snapshot.labels, snapshot.n_components
    dem = np.flatnonzero(D > 0)
    sup = np.flatnonzero(P > 0)
    lines = np.flatnonzero(snapshot.alive)
    nd, ns, nl = dem.size, sup.size, lines.size
    o_s, o_f = 0, nd
    o_th = o_f + nl
    o_lam = o_th + n
    o_P = o_lam + nc
    o_F = o_P + ns
    nv = o_F + nl

    src, dst, x = grid.src[lines], grid.dst[lines], grid.reactance[lines]
    mavg = np.nan_to_num(snapshot.mavg[lines])
    ul = u[lines]
    kl = np.arange(nl)

    eq_r, eq_c, eq_v, beq = [], [], [], []

    def add(rows, cols, vals):
        eq_r.append(np.asarray(rows)), eq_c.append(np.asarray(cols)), eq_v.append(np.asarray(vals, dtype=float))

    # node balance: out - in - P_i + s_i = -D_i
    r0 = 0
    add(r0 + src, o_f + kl, np.ones(nl))
    add(r0 + dst, o_f + kl, -np.ones(nl))
    add(r0 + sup, o_P + np.arange(ns), -np.ones(ns))
    add(r0 + dem, o_s + np.arange(nd), -np.ones(nd))
    beq.append(-D.copy())
    # Ohm: theta_src - theta_dst - x f = 0
    r0 += n
    add(r0 + kl, o_th + src, np.ones(nl))
    add(r0 + kl, o_th + dst, -np.ones(nl))
    add(r0 + kl, o_f + kl, -x)
    beq.append(np.zeros(nl))
    # generators: P_i + P~_i lambda_comp = P~_i
    r0 += nl
    add(r0 + np.arange(ns), o_P + np.arange(ns), np.ones(ns))
    add(r0 + np.arange(ns), o_lam + labels[sup], P[sup])
    beq.append(P[sup].copy())
    # island balance: sum P + sum s = sum D~  (redundant given node balance)
    r0 += ns
    add(r0 + labels[sup], o_P + np.arange(ns), np.ones(ns))
    add(r0 + labels[dem], o_s + np.arange(nd), np.ones(nd))
    beq.append(np.bincount(labels, weights=D, minlength=nc))
    m_eq = r0 + nc
    A_eq = sp.csr_matrix(
        (np.concatenate(eq_v), (np.concatenate(eq_r), np.concatenate(eq_c))), shape=(m_eq, nv)
    )
    b_eq = np.concatenate(beq)

    # f - F <= 0, -f - F <= 0, alpha F <= (1-eps)u - (1-alpha) mavg
    rows = np.concatenate([kl, kl, nl + kl, nl + kl, 2 * nl + kl])
    cols = np.concatenate([o_f + kl, o_F + kl, o_f + kl, o_F + kl, o_F + kl])
    vals = np.concatenate([np.ones(nl), -np.ones(nl), -np.ones(nl), -np.ones(nl), np.full(nl, alpha)])
    A_ub = sp.csr_matrix((vals, (rows, cols)), shape=(3 * nl, nv))
    b_ub = np.concatenate([np.zeros(2 * nl), (1 - epsilon) * ul - (1 - alpha) * mavg])

    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    lb[o_s:o_s + nd], ub[o_s:o_s + nd] = 0.0, D[dem]
    lb[o_lam:o_lam + nc], ub[o_lam:o_lam + nc] = 0.0, 1.0
    lb[o_F:o_F + nl] = 0.0
    # reference phase per island
    first = np.full(nc, n)
    np.minimum.at(first, labels, np.arange(n))
    lb[o_th + first], ub[o_th + first] = 0.0, 0.0

    c = np.zeros(nv)
    c[o_s:o_s + nd] = 1.0
    prog = lpmod.LinearProgram(c, A_ub, b_ub, A_eq, b_eq, lb, ub)
    return ControlLP(prog, snapshot, dem, sup, lines, n)


def solve_lp(clp: ControlLP, backend: str = "auto") -> ControlSolution:
    """Solve; raise :class:`ControlInfeasible` when no plan stabilizes the grid."""
    try:
        res = lpmod.solve(clp.lp, backend)
    except lpmod.LPInfeasible as exc:
        raise ControlInfeasible(f"round {clp.snapshot.round}: no feasible shedding ({exc})") from None
    except lpmod.LPUnbounded as exc:  # objective is bounded below by zero
        raise ControlError(f"LP reported unbounded: {exc}") from None
    sl = clp.slices
    snap = clp.snapshot
    xs = res.x
    n = clp.n_nodes
    D = snap.demand

    s_raw = xs[sl["s"]]
    lam_raw = xs[sl["lambda"]]
    bad = max(
        float(np.max(-s_raw, initial=0.0)),
        float(np.max(s_raw - D[clp.demand_nodes], initial=0.0)),
        float(np.max(-lam_raw, initial=0.0)),
        float(np.max(lam_raw - 1.0, initial=0.0)),
    )
    if bad > BOUND_TOL:
        raise ControlError(f"solver returned a bound violation of {bad:.3g}")
    shed_ = np.zeros(n)
    shed_[clp.demand_nodes] = np.clip(s_raw, 0.0, D[clp.demand_nodes])
    lam = np.clip(lam_raw, 0.0, 1.0)
    flow = np.zeros(clp.snapshot.alive.size)
    flow[clp.lines] = xs[sl["f"]]
    gen = np.zeros(n)
    gen[clp.supply_nodes] = snap.supply[clp.supply_nodes] * (1.0 - lam[snap.labels[clp.supply_nodes]])
    served = float((D - shed_).sum())
    return ControlSolution(
        round=snap.round,
        shed=shed_,
        lambda_=lam,
        flow=flow,
        phase=xs[sl["theta"]].copy(),
        generation=gen,
        objective=float(shed_.sum()),
        served_demand=served,
        yield_=served / snap.original_demand if snap.original_demand > 0 else 1.0,
        backend=res.backend,
        residuals=clp.lp.residuals(xs),
    )


def apply_control(grid: Grid, snapshot: ControlSnapshot, sol: ControlSolution, config: CascadeConfig, solver=None):
    """Run one cascade round from the controlled state; return ``(state, removed)``."""
    state = CascadeState(
        alive=snapshot.alive.copy(),
        demand=snapshot.demand - sol.shed,
        supply=sol.generation.copy(),
        mavg=snapshot.mavg.copy(),
        round=snapshot.round - 1,
    )
    nxt, removed, _ = step(grid, state, config, make_rng(config.seed), solver)
    return nxt, removed


# ---------------------------------------------------------------------------
# Round sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlOutcome:
    round: int
    yield_: float | None
    status: str  # "stable", "unstable", "infeasible" or "error"
    objective: float | None = None
    lines_removed_after: int | None = None
    message: str = ""


def snapshots(grid: Grid, initial_failure, config: CascadeConfig, rounds) -> tuple[dict[int, ControlSnapshot], int]:
    """Replay the uncontrolled cascade once; return snapshots for ``rounds`` and its length."""
    wanted = {max(int(t), 1) for t in rounds}
    out: dict[int, ControlSnapshot] = {}
    original = float(grid.demand.sum())
    last_round = 0
    for state, rec in iterate(grid, tuple(initial_failure), config, DCSolver(grid)):
        if rec is not None:
            last_round = rec.round
        t = state.round + 1
        if t in wanted:
            out[t] = ControlSnapshot.from_state(grid, state, original)
    length = max(last_round, 1)
    return out, length


def _control_one(args) -> ControlOutcome:
    grid, snap, config, alpha, eps, backend, t = args
    try:
        clp = build_lp(snap, grid, None, alpha, eps)
        sol = solve_lp(clp, backend)
    except ControlInfeasible as exc:
        return ControlOutcome(t, None, "infeasible", message=str(exc))
    except (ControlError, lpmod.LPError, ValueError) as exc:
        return ControlOutcome(t, None, "error", message=str(exc))
    _, removed = apply_control(grid, snap, sol, config)
    status = "stable" if not removed else "unstable"
    if removed:
        log.warning("control at round %d left %d line(s) overloaded", t, len(removed))
    return ControlOutcome(t, sol.yield_, status, sol.objective, len(removed))


def control_sweep(
    grid: Grid,
    initial_failure,
    config: CascadeConfig = CascadeConfig(),
    rounds=(1,),
    capacities=None,
    epsilon: float | None = None,
    backend: str = "auto",
    jobs: int = 1,
) -> list[ControlOutcome]:
    """Control at each round of ``rounds``; returns one outcome per entry.

    Round 0 is treated as round 1 (the state right after the failure
    event).  ``epsilon`` is the control margin; it defaults to the
    cascade's.
    """
    if capacities is not None:
        grid = grid.with_capacities(capacities)
    rounds = [int(t) for t in rounds]
    if any(t < 0 for t in rounds):
        raise ValueError("control rounds must be non-negative")
    snaps, length = snapshots(grid, initial_failure, config, rounds)
    too_late = [t for t in rounds if max(t, 1) > length]
    if too_late:
        raise ValueError(f"round(s) {too_late} are past the uncontrolled cascade, which lasts {length} round(s)")
    eps = config.epsilon if epsilon is None else float(epsilon)
    tasks = [(grid, snaps[max(t, 1)], config, config.alpha, eps, backend, t) for t in rounds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_control_one, tasks))
    return [_control_one(t) for t in tasks]


def outcomes_csv(outcomes: list[ControlOutcome]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Round", "Yield", "status"])
    for o in outcomes:
        w.writerow([o.round, "" if o.yield_ is None else repr(o.yield_), o.status])
    return buf.getvalue()
