"""Linear programs in bounded general form and two interchangeable solvers.

``minimize c @ x  s.t.  A_ub @ x <= b_ub,  A_eq @ x == b_eq,  lb <= x <= ub``

``simplex`` is a dense two-phase tableau method with Bland's rule, meant for
small instances.  ``highs`` hands the problem to scipy's HiGHS wrapper.
``auto`` picks the tableau up to ``AUTO_SIMPLEX_MAX_VARS`` variables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-9
AUTO_SIMPLEX_MAX_VARS = 400


class LPError(RuntimeError):
    pass


class LPInfeasible(LPError):
    pass


class LPUnbounded(LPError):
    pass


@dataclass
class LinearProgram:
    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    @property
    def n_vars(self) -> int:
        return self.c.size

    def residuals(self, x: np.ndarray) -> dict[str, float]:
        """Worst violation per constraint family (0 when satisfied)."""
        r_ub = self.A_ub @ x - self.b_ub if self.b_ub.size else np.zeros(1)
        r_eq = self.A_eq @ x - self.b_eq if self.b_eq.size else np.zeros(1)
        lo = np.where(np.isfinite(self.lb), self.lb - x, 0.0)
        hi = np.where(np.isfinite(self.ub), x - self.ub, 0.0)
        return {
            "ub": float(max(0.0, r_ub.max())),
            "eq": float(np.abs(r_eq).max()),
            "bounds": float(max(0.0, lo.max(initial=0.0), hi.max(initial=0.0))),
        }


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    iterations: int
    backend: str


# ---------------------------------------------------------------------------
# Dense tableau simplex
# ---------------------------------------------------------------------------


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    col_vals = T[:, col].copy()
    col_vals[row] = 0.0
    nz = np.flatnonzero(np.abs(col_vals) > 0)
    if nz.size:
        T[nz] -= np.outer(col_vals[nz], T[row])


def _bland(T: np.ndarray, basis: list[int], n_cols: int, max_iter: int) -> int:
    """Minimize the objective in the last row of ``T`` over columns < n_cols."""
    it = 0
    m = T.shape[0] - 1
    while True:
        red = T[-1, :n_cols]
        cand = np.flatnonzero(red < -PIVOT_TOL)
        if cand.size == 0:
            return it
        col = int(cand[0])
        colv = T[:m, col]
        pos = np.flatnonzero(colv > PIVOT_TOL)
        if pos.size == 0:
            raise LPUnbounded("objective is unbounded below")
        ratios = T[pos, -1] / colv[pos]
        best = ratios.min()
        ties = pos[ratios <= best + PIVOT_TOL * max(1.0, abs(best))]
        row = int(min(ties, key=lambda r: basis[r]))
        _pivot(T, row, col)
        basis[row] = col
        it += 1
        if it > max_iter:
            raise LPError("simplex iteration limit reached")


def _to_standard(lp: LinearProgram):
    """Rewrite as ``min c'y, A y = b, y >= 0``; return the pieces and the map x = x0 + M y."""
    n = lp.n_vars
    lb, ub = lp.lb.astype(float), lp.ub.astype(float)
    x0 = np.zeros(n)
    cols = []  # (var, sign)
    extra_ub = []  # (column index in y, bound)
    for j in range(n):
        lo, hi = lb[j], ub[j]
        if np.isfinite(lo) and np.isfinite(hi) and hi < lo - FEAS_TOL:
            raise LPInfeasible(f"variable {j} has empty bounds")
        if np.isfinite(lo) and np.isfinite(hi) and hi - lo <= FEAS_TOL:
            x0[j] = lo
        elif np.isfinite(lo):
            x0[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                extra_ub.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            x0[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    k = len(cols)
    Mx = np.zeros((n, k))
    for q, (j, sgn) in enumerate(cols):
        Mx[j, q] = sgn

    A_ub = lp.A_ub.toarray() if lp.b_ub.size else np.zeros((0, n))
    A_eq = lp.A_eq.toarray() if lp.b_eq.size else np.zeros((0, n))
    Aub_y = A_ub @ Mx
    bub_y = lp.b_ub - A_ub @ x0
    if extra_ub:
        rows = np.zeros((len(extra_ub), k))
        for r, (q, bound) in enumerate(extra_ub):
            rows[r, q] = 1.0
        Aub_y = np.vstack([Aub_y, rows])
        bub_y = np.concatenate([bub_y, [b for _, b in extra_ub]])
    Aeq_y = A_eq @ Mx
    beq_y = lp.b_eq - A_eq @ x0
    m_ub = Aub_y.shape[0]
    A = np.block([
        [Aub_y, np.eye(m_ub)],
        [Aeq_y, np.zeros((Aeq_y.shape[0], m_ub))],
    ]) if (m_ub + Aeq_y.shape[0]) else np.zeros((0, k))
    b = np.concatenate([bub_y, beq_y])
    c = np.concatenate([lp.c @ Mx, np.zeros(m_ub)])
    return A, b, c, x0, Mx, k


def simplex(lp: LinearProgram, max_iter: int = 50_000) -> LPResult:
    A, b, c, x0, Mx, k = _to_standard(lp)
    m, n = A.shape
    if m == 0:
        if np.any(c[:k] < -PIVOT_TOL):
            raise LPUnbounded("objective is unbounded below")
        return LPResult(x0.copy(), float(lp.c @ x0), 0, "simplex")
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # phase 1: artificials on every row
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    it = _bland(T, basis, n + m, max_iter)
    scale = max(1.0, float(np.abs(b).max()))
    if -T[-1, -1] > FEAS_TOL * scale * max(1, m) ** 0.5:
        raise LPInfeasible(f"phase 1 ended with infeasibility {-T[-1, -1]:.3g}")

    # drive artificials out of the basis; rows where that fails are redundant
    keep_rows = []
    for r in range(m):
        if basis[r] >= n:
            nz = np.flatnonzero(np.abs(T[r, :n]) > PIVOT_TOL)
            if nz.size:
                _pivot(T, r, int(nz[0]))
                basis[r] = int(nz[0])
                keep_rows.append(r)
        else:
            keep_rows.append(r)
    T = np.vstack([T[keep_rows][:, list(range(n)) + [-1]], np.zeros((1, n + 1))])
    basis = [basis[r] for r in keep_rows]

    # phase 2
    T[-1, :n] = c
    for r, j in enumerate(basis):
        if T[-1, j] != 0:
            T[-1] -= T[-1, j] * T[r]
    it += _bland(T, basis, n, max_iter)
    y = np.zeros(n)
    for r, j in enumerate(basis):
        y[j] = T[r, -1]
    x = x0 + Mx @ y[:k]
    return LPResult(x, float(lp.c @ x), it, "simplex")


# ---------------------------------------------------------------------------
# HiGHS
# ---------------------------------------------------------------------------


def highs(lp: LinearProgram) -> LPResult:
    from scipy.optimize import linprog

    bounds = list(zip(
        [None if not np.isfinite(v) else float(v) for v in lp.lb],
        [None if not np.isfinite(v) else float(v) for v in lp.ub],
    ))
    res = linprog(
        lp.c,
        A_ub=lp.A_ub if lp.b_ub.size else None,
        b_ub=lp.b_ub if lp.b_ub.size else None,
        A_eq=lp.A_eq if lp.b_eq.size else None,
        b_eq=lp.b_eq if lp.b_eq.size else None,
        bounds=bounds,
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status == 2:
        raise LPInfeasible(res.message)
    if res.status == 3:
        raise LPUnbounded(res.message)
    if res.status != 0:
        raise LPError(res.message)
    return LPResult(np.asarray(res.x), float(res.fun), int(res.nit), "highs")


BACKENDS = {"simplex": simplex, "highs": highs}


def solve(lp: LinearProgram, backend: str = "auto") -> LPResult:
    if backend == "auto":
        backend = "simplex" if lp.n_vars <= AUTO_SIMPLEX_MAX_VARS else "highs"
    try:
        fn = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown LP backend {backend!r}; choose from auto, {', '.join(BACKENDS)}") from None
    return fn(lp)
