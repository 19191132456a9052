"""Round-based cascading failure simulation.

Each round: shed demand or supply per island, re-solve the DC flow, update
the per-line moving average ``ma = alpha*|f| + (1-alpha)*ma_prev``, and
remove every line the outage rule fires on, all at once.  The loop stops at
the first round that removes nothing.

Round 0 is the failure event itself; rounds 1, 2, ... are cascade rounds.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dcflow import DCSolver, FlowSolution
from .gridcore import Grid, component_labels

# values within this (relative to max(1, u)) of a threshold count as on it
OUTAGE_ATOL = 1e-9
FEASIBILITY_ATOL = 1e-9


class CascadeError(RuntimeError):
    pass


class InfeasibleStartError(CascadeError):
    """Some line carries more than its capacity before the failure event."""


@dataclass(frozen=True)
class CascadeConfig:
    alpha: float = 1.0
    epsilon: float = 0.0
    p: float = 0.0
    seed: int = 0
    max_rounds: int = 1000

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not (0.0 <= self.epsilon < 1.0):
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if not (0.0 <= self.p <= 1.0):
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in 64 unsigned bits")

    @property
    def deterministic(self) -> bool:
        return self.epsilon == 0.0 or self.p in (0.0, 1.0)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShedResult:
    demand: np.ndarray
    supply: np.ndarray
    labels: np.ndarray
    n_components: int
    demand_scale: np.ndarray  # per component
    supply_scale: np.ndarray  # per component

    def injection(self) -> np.ndarray:
        return self.supply - self.demand


def shed(grid: Grid, alive, demand: np.ndarray, supply: np.ndarray) -> ShedResult:
    """Scale demand (or supply) uniformly inside each island to balance it."""
    alive = grid.alive_mask(alive=alive)
    demand = np.asarray(demand, dtype=float)
    supply = np.asarray(supply, dtype=float)
    if (demand < 0).any() or (supply < 0).any():
        raise ValueError("demand and supply must be non-negative")
    ncomp, labels = component_labels(grid, alive)
    tot_d = np.bincount(labels, weights=demand, minlength=ncomp)
    tot_p = np.bincount(labels, weights=supply, minlength=ncomp)
    d_scale = np.ones(ncomp)
    p_scale = np.ones(ncomp)
    over_d = tot_d > tot_p
    over_p = tot_p > tot_d
    d_scale[over_d] = tot_p[over_d] / tot_d[over_d]
    p_scale[over_p] = tot_d[over_p] / tot_p[over_p]
    new_d = demand * d_scale[labels]
    new_p = supply * p_scale[labels]
    # exact balance for the scaled side despite rounding
    for c in np.flatnonzero(over_d | over_p):
        members = labels == c
        if over_d[c] and tot_p[c] > 0:
            new_d[members] *= tot_p[c] / new_d[members].sum()
        elif over_p[c] and tot_d[c] > 0:
            new_p[members] *= tot_d[c] / new_p[members].sum()
    return ShedResult(new_d, new_p, labels, ncomp, d_scale, p_scale)


def _threshold_tol(u):
    return OUTAGE_ATOL * np.maximum(1.0, u)


def outage_decision(mavg: float, u: float, config: CascadeConfig, rng=None) -> bool:
    """Outage rule: certain above (1+eps)u, never at or below (1-eps)u,
    probability ``p`` in between."""
    if u < 0 or mavg < 0:
        raise ValueError("capacity and moving average must be non-negative")
    tol = _threshold_tol(u)
    if mavg > (1 + config.epsilon) * u + tol:
        return True
    if mavg <= (1 - config.epsilon) * u + tol:
        return False
    if rng is None:
        raise ValueError("an RNG is needed inside the probabilistic band")
    return bool(rng.random() < config.p)


def outage_mask(mavg: np.ndarray, u: np.ndarray, alive: np.ndarray, config: CascadeConfig, rng) -> np.ndarray:
    """Vectorized outage rule; band lines draw in ascending line id order."""
    tol = _threshold_tol(u)
    sure = alive & (mavg > (1 + config.epsilon) * u + tol)
    safe = ~alive | (mavg <= (1 - config.epsilon) * u + tol)
    out = sure.copy()
    for lid in np.flatnonzero(~sure & ~safe):
        out[lid] = rng.random() < config.p
    return out


# ---------------------------------------------------------------------------
# State machine
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CascadeState:
    alive: np.ndarray
    demand: np.ndarray  # effective demand carried into the next round
    supply: np.ndarray
    mavg: np.ndarray  # NaN on dead lines
    round: int
    flow: FlowSolution | None = None
    stable: bool = False


@dataclass(frozen=True)
class RoundRecord:
    round: int
    faulted: tuple[int, ...]
    components: int
    max_overload: float  # max |f|/u over lines in service during the round
    max_mavg_overload: float  # same with the moving average
    served_demand: float


def _overload(values: np.ndarray, u: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    v, c = values[mask], u[mask]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(c > 0, v / np.where(c > 0, c, 1.0), np.where(v > _threshold_tol(c), math.inf, 0.0))
    return float(ratio.max())


def step(grid: Grid, state: CascadeState, config: CascadeConfig, rng, solver: DCSolver | None = None):
    """Run one cascade round; return ``(next_state, removed_ids, record)``."""
    solver = solver or DCSolver(grid)
    u = grid.capacity
    sh = shed(grid, state.alive, state.demand, state.supply)
    sol = solver.solve(state.alive, sh.injection())
    absf = np.abs(sol.flow)
    mavg = np.where(state.alive, config.alpha * absf + (1 - config.alpha) * state.mavg, np.nan)
    fault = outage_mask(np.nan_to_num(mavg), u, state.alive, config, rng)
    removed = tuple(int(i) for i in np.flatnonzero(fault))
    alive = state.alive & ~fault
    mavg_next = np.where(alive, mavg, np.nan)
    ncomp, _ = component_labels(grid, alive)
    t = state.round + 1
    rec = RoundRecord(
        round=t,
        faulted=removed,
        components=ncomp,
        max_overload=_overload(absf, u, state.alive),
        max_mavg_overload=_overload(np.nan_to_num(mavg), u, state.alive),
        served_demand=float(sh.demand.sum()),
    )
    nxt = CascadeState(alive, sh.demand, sh.supply, mavg_next, t, sol, stable=not removed)
    return nxt, set(removed), rec


@dataclass
class CascadeReport:
    yield_: float
    rounds_to_stability: int
    stable: bool
    max_rounds_exceeded: bool
    original_demand: float
    records: list[RoundRecord]
    final_demand: np.ndarray
    zero_capacity_lines: int = 0
    initial_failure: tuple[int, ...] = ()

    @property
    def faulted_lines_by_round(self) -> list[set[int]]:
        return [set(r.faulted) for r in self.records]

    @property
    def component_count_by_round(self) -> list[int]:
        return [r.components for r in self.records]

    @property
    def max_overload_by_round(self) -> list[float]:
        return [r.max_overload for r in self.records]

    @property
    def total_faulted(self) -> int:
        return sum(len(r.faulted) for r in self.records)

    @property
    def final_components(self) -> int:
        return self.records[-1].components

    def summary(self) -> dict:
        return {
            "yield": self.yield_,
            "rounds_to_stability": self.rounds_to_stability,
            "stable": self.stable,
            "max_rounds_exceeded": self.max_rounds_exceeded,
            "original_demand": self.original_demand,
            "served_demand": float(self.final_demand.sum()),
            "initial_failure": list(self.initial_failure),
            "total_faulted": self.total_faulted,
            "final_components": self.final_components,
            "zero_capacity_lines": self.zero_capacity_lines,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "lines_faulted", "components", "max_overload", "served_demand"])
        for r in self.records:
            w.writerow([r.round, len(r.faulted), r.components, repr(r.max_overload), repr(r.served_demand)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def initial_state(grid: Grid, initial_failure=(), solver: DCSolver | None = None):
    """Pre-failure solve and feasibility check; returns ``(state, pre_solution)``.

    The returned state has the failure already applied and the moving
    average seeded with pre-failure ``|f|``.
    """
    if not grid.has_capacities:
        raise CascadeError("every line needs a capacity before simulating (provision first)")
    solver = solver or DCSolver(grid)
    full = np.ones(grid.n_lines, dtype=bool)
    pre = solver.solve(full, grid.injection())
    u = grid.capacity
    absf = np.abs(pre.flow)
    over = absf > u + FEASIBILITY_ATOL * np.maximum(1.0, u)
    if over.any():
        k = int(np.flatnonzero(over)[0])
        raise InfeasibleStartError(
            f"{int(over.sum())} line(s) exceed capacity before the failure (e.g. line {k}: |f|={absf[k]:.6g} > u={u[k]:.6g})"
        )
    alive = grid.alive_mask(removed=initial_failure)
    mavg = np.where(alive, absf, np.nan)
    state = CascadeState(alive, grid.demand.copy(), grid.supply.copy(), mavg, 0, pre)
    return state, pre


def iterate(grid: Grid, initial_failure, config: CascadeConfig, solver: DCSolver | None = None):
    """Yield ``(state_before_round, record_of_round)`` pairs until stability.

    The first pair is ``(state after the failure event, None)``; the state
    it carries is what control at round 1 sees.
    """
    solver = solver or DCSolver(grid)
    rng = make_rng(config.seed)
    state, _ = initial_state(grid, initial_failure, solver)
    yield state, None
    if not initial_failure:
        return
    for _ in range(config.max_rounds):
        state, removed, rec = step(grid, state, config, rng, solver)
        yield state, rec
        if not removed:
            return


def run(grid: Grid, initial_failure, config: CascadeConfig = CascadeConfig()) -> CascadeReport:
    initial_failure = tuple(sorted(set(int(i) for i in initial_failure)))
    solver = DCSolver(grid)
    original = float(grid.demand.sum())
    u = grid.capacity if grid.has_capacities else None
    records: list[RoundRecord] = []
    states = iterate(grid, initial_failure, config, solver)
    state, _ = next(states)
    pre = state.flow
    ncomp, _ = component_labels(grid, state.alive)
    full = np.ones(grid.n_lines, dtype=bool)
    absf = np.abs(pre.flow)
    records.append(
        RoundRecord(0, initial_failure, ncomp, _overload(absf, u, full), _overload(absf, u, full), original)
    )
    last = state
    for last, rec in states:
        records.append(rec)
    stable = last.stable or not initial_failure
    served = last.demand if initial_failure else grid.demand.copy()
    rounds = last.round
    return CascadeReport(
        yield_=float(served.sum() / original) if original > 0 else 1.0,
        rounds_to_stability=rounds,
        stable=stable,
        max_rounds_exceeded=not stable,
        original_demand=original,
        records=records,
        final_demand=served,
        zero_capacity_lines=int(np.sum(u == 0)),
        initial_failure=initial_failure,
    )


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def derive_seeds(seed: int, runs: int) -> list[int]:
    """Per-run 64-bit seeds spawned deterministically from one master seed."""
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(runs)]


def _run_one(args):
    grid, failure, config = args
    return run(grid, failure, config)


@dataclass
class MonteCarloResult:
    mean_yield: float
    std_yield: float
    seeds: list[int]
    reports: list[CascadeReport] = field(repr=False)

    @property
    def yields(self) -> np.ndarray:
        return np.array([r.yield_ for r in self.reports])


def monte_carlo(grid: Grid, initial_failure, config: CascadeConfig, runs: int, jobs: int = 1) -> MonteCarloResult:
    if runs < 1:
        raise ValueError("runs must be >= 1")
    seeds = derive_seeds(config.seed, runs)
    tasks = [(grid, tuple(initial_failure), replace(config, seed=s)) for s in seeds]
    if jobs > 1 and runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_run_one, tasks))
    else:
        reports = [_run_one(t) for t in tasks]
    y = np.array([r.yield_ for r in reports])
    return MonteCarloResult(float(y.mean()), float(y.std()), seeds, reports)
