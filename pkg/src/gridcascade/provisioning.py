"""Line capacities from N and N-1 contingency analysis with a factor of safety."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cascade import shed
from .dcflow import DCSolver
from .gridcore import Grid, component_labels


@dataclass(frozen=True)
class ProvisioningSpec:
    k: int = 0
    fos: float = 1.2
    overrides: dict[int, float] = field(default_factory=dict)  # line id -> its own FoS

    def __post_init__(self):
        if self.k not in (0, 1):
            raise ValueError("only N (k=0) and N-1 (k=1) provisioning are supported")
        if self.fos < 1:
            raise ValueError(f"factor of safety must be >= 1, got {self.fos}")
        for lid, kk in self.overrides.items():
            if kk < 1:
                raise ValueError(f"override FoS for line {lid} must be >= 1")

    def factors(self, n_lines: int) -> np.ndarray:
        K = np.full(n_lines, float(self.fos))
        for lid, kk in self.overrides.items():
            if not 0 <= lid < n_lines:
                raise ValueError(f"override names unknown line {lid}")
            K[lid] = kk
        return K


# flows below this fraction of the largest flow are rounding noise
SNAP_RTOL = 1e-12


def _snap(f: np.ndarray) -> np.ndarray:
    if f.size:
        f[f <= SNAP_RTOL * max(1.0, float(f.max()))] = 0.0
    return f


def base_flows(grid: Grid) -> np.ndarray:
    """|f| on the intact grid."""
    sol = DCSolver(grid).solve(np.ones(grid.n_lines, dtype=bool), grid.injection())
    return _snap(np.abs(sol.flow))


def provision_n(grid: Grid, K=1.0) -> np.ndarray:
    return np.asarray(K, dtype=float) * base_flows(grid)


def _contingency_chunk(args):
    grid, ids = args
    solver = DCSolver(grid, cache_size=1)
    worst = np.zeros(grid.n_lines)
    islanding = []
    full = np.ones(grid.n_lines, dtype=bool)
    n0, _ = component_labels(grid, full)
    for r in ids:
        alive = full.copy()
        alive[r] = False
        sh = shed(grid, alive, grid.demand, grid.supply)
        if sh.n_components > n0:
            islanding.append(int(r))
        sol = solver.solve(alive, sh.injection())
        np.maximum(worst, np.abs(sol.flow), out=worst)
    return worst, islanding


def contingency_maxima(grid: Grid, jobs: int = 1) -> tuple[np.ndarray, list[int]]:
    """Element-wise max |f| over the intact case and every single-line outage.

    Outages that split the grid are shed before solving; their ids are
    returned as the second element.
    """
    worst = base_flows(grid)
    ids = np.arange(grid.n_lines)
    if jobs > 1 and grid.n_lines > 1:
        chunks = [(grid, c) for c in np.array_split(ids, jobs) if c.size]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_contingency_chunk, chunks))
    else:
        parts = [_contingency_chunk((grid, ids))]
    islanding: list[int] = []
    for w, isl in parts:
        np.maximum(worst, w, out=worst)
        islanding.extend(isl)
    return _snap(worst), sorted(islanding)


def provision_n_minus_1(grid: Grid, K=1.0, jobs: int = 1) -> np.ndarray:
    worst, _ = contingency_maxima(grid, jobs)
    return np.asarray(K, dtype=float) * worst


def provision(grid: Grid, spec: ProvisioningSpec, jobs: int = 1) -> Grid:
    """Return ``grid`` with capacities set per ``spec``."""
    K = spec.factors(grid.n_lines)
    if spec.k == 0:
        u = provision_n(grid, K)
    else:
        u = provision_n_minus_1(grid, K, jobs)
    return grid.with_capacities(u)
