"""Linearized (DC) power flow.

Flows are eliminated through ``f = (theta_src - theta_dst) / x`` and the
weighted Laplacian system ``L theta = injection`` is solved per connected
component, pinning the smallest node id of each component to ``theta = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .gridcore import Grid, component_labels

BALANCE_RTOL = 1e-9
RESIDUAL_RTOL = 1e-9
# a solve whose backward error exceeds this is reported as a solver failure
FAILURE_RTOL = 1e-6


class FlowError(RuntimeError):
    pass


class UnbalancedError(FlowError):
    pass


class SolverError(FlowError):
    pass


class PathError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FlowSolution:
    flow: np.ndarray  # per line, 0 on dead lines
    phase: np.ndarray  # per node
    alive: np.ndarray  # bool mask over lines
    labels: np.ndarray  # component label per node (alive subgraph)
    n_components: int

    def abs_flow(self) -> np.ndarray:
        return np.abs(self.flow)


def incidence(grid: Grid, alive: np.ndarray) -> sp.csr_matrix:
    """Node-by-line incidence: +1 at the source, -1 at the destination."""
    idx = np.flatnonzero(alive)
    k = idx.size
    rows = np.concatenate([grid.src[idx], grid.dst[idx]])
    cols = np.concatenate([np.arange(k), np.arange(k)])
    vals = np.concatenate([np.ones(k), -np.ones(k)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_nodes, k))


def component_imbalance(labels: np.ndarray, n_comp: int, injection: np.ndarray) -> np.ndarray:
    return np.bincount(labels, weights=injection, minlength=n_comp)


class DCSolver:
    """Solver bound to one grid, caching factorizations per alive-line set.

    Instances are cheap; keep one per worker.  The cache holds at most
    ``cache_size`` factorizations.
    """

    def __init__(self, grid: Grid, cache_size: int = 8):
        self.grid = grid
        self.cache_size = cache_size
        self._cache: dict[bytes, tuple] = {}

    def _factor(self, alive: np.ndarray):
        key = np.packbits(alive).tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        g = self.grid
        n_comp, labels = component_labels(g, alive)
        A = incidence(g, alive)
        w = 1.0 / g.reactance[alive]
        L = (A @ sp.diags(w) @ A.T).tocsc()
        ref = np.zeros(n_comp, dtype=np.int64)
        seen = np.zeros(n_comp, dtype=bool)
        for node, lab in enumerate(labels):
            if not seen[lab]:
                seen[lab] = True
                ref[lab] = node
        free = np.ones(g.n_nodes, dtype=bool)
        free[ref] = False
        free_idx = np.flatnonzero(free)
        lu = None
        if free_idx.size:
            try:
                lu = splu(L[free_idx][:, free_idx].tocsc())
            except RuntimeError as e:
                raise SolverError(f"Laplacian factorization failed: {e}") from None
        entry = (n_comp, labels, A, w, free_idx, lu)
        if len(self._cache) >= self.cache_size:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = entry
        return entry

    def solve(self, alive, injection: np.ndarray) -> FlowSolution:
        g = self.grid
        alive = g.alive_mask(alive=alive)
        inj = np.asarray(injection, dtype=float)
        if inj.shape != (g.n_nodes,):
            raise ValueError("injection length must equal node count")
        n_comp, labels, A, w, free_idx, lu = self._factor(alive)

        scale = np.bincount(labels, weights=np.abs(inj), minlength=n_comp) / 2.0
        imb = component_imbalance(labels, n_comp, inj)
        bad = np.abs(imb) > BALANCE_RTOL * np.maximum(scale, 1.0)
        if bad.any():
            c = int(np.flatnonzero(bad)[0])
            raise UnbalancedError(
                f"component {c} is unbalanced: net injection {imb[c]:.6g} "
                f"(tolerance {BALANCE_RTOL:g} relative)"
            )

        theta = np.zeros(g.n_nodes)
        if lu is not None:
            # zero-injection components are solved too; their solution is exactly 0
            theta[free_idx] = lu.solve(inj[free_idx])
        theta.setflags(write=False)
        flow = np.zeros(g.n_lines)
        flow[alive] = w * (A.T @ theta)

        resid = A @ flow[alive] - inj
        tol = FAILURE_RTOL * np.maximum(1.0, np.abs(inj))
        if np.any(np.abs(resid) > tol) or not np.all(np.isfinite(flow)):
            raise SolverError(
                f"flow conservation residual {np.max(np.abs(resid)):.3g} exceeds tolerance"
            )
        flow.setflags(write=False)
        return FlowSolution(flow, theta, alive, labels, n_comp)


def solve(grid: Grid, alive, injection: np.ndarray) -> FlowSolution:
    """One-shot DC power flow on the subgraph of ``alive`` lines."""
    return DCSolver(grid, cache_size=1).solve(alive, injection)


def conservation_residual(grid: Grid, sol: FlowSolution, injection: np.ndarray) -> np.ndarray:
    """Per-node ``out - in - injection``."""
    out = np.zeros(grid.n_nodes)
    np.add.at(out, grid.src, sol.flow)
    np.subtract.at(out, grid.dst, sol.flow)
    return out - np.asarray(injection, dtype=float)


def phase_residual(grid: Grid, sol: FlowSolution) -> np.ndarray:
    """Per alive line ``theta_src - theta_dst - x f``."""
    a = sol.alive
    return (
        sol.phase[grid.src[a]] - sol.phase[grid.dst[a]] - grid.reactance[a] * sol.flow[a]
    )


def path_sum(sol: FlowSolution, grid: Grid, path: Sequence[int]) -> float:
    """Signed sum of ``f * x`` along ``path = (n0, l0, n1, l1, ..., nk)``.

    Each line counts positively when traversed along its orientation.
    """
    if len(path) % 2 != 1:
        raise PathError("path must alternate node, line, ..., node")
    total = 0.0
    for k in range(0, len(path) - 1, 2):
        a, lid, b = path[k], path[k + 1], path[k + 2]
        if not (0 <= lid < grid.n_lines):
            raise PathError(f"unknown line {lid}")
        if not sol.alive[lid]:
            raise PathError(f"line {lid} is not in service")
        line = grid.lines[lid]
        fx = sol.flow[lid] * line.reactance
        if (line.src, line.dst) == (a, b):
            total += fx
        elif (line.dst, line.src) == (a, b):
            total -= fx
        else:
            raise PathError(f"line {lid} does not join nodes {a} and {b}")
    return float(total)
