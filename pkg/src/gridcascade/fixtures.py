"""Analytic topologies with closed-form flows: the M-ring and the Q-graph.

M-ring line numbering (area ``i`` owns ids ``5i .. 5i+4``)::

    5i     even   (i, M+2i)
    5i+1   even'  (i, M+2i)
    5i+2   odd    (i, M+2i+1)
    5i+3   odd'   (i, M+2i+1)
    5i+4   tie    (M+2i+1, M + (2i+2 mod 2M))

Q-graph numbering: node 0 is the supply, node 1 the demand; lines of path 1
come first, then path 2, and so on, each path listed from supply to demand.
"""

from __future__ import annotations

import math

import numpy as np

from .gridcore import DEMAND, NEUTRAL, SUPPLY, Grid, Line, Node

EVEN, EVEN_P, ODD, ODD_P, TIE = range(5)
KINDS = {"even": EVEN, "even'": EVEN_P, "odd": ODD, "odd'": ODD_P, "tie": TIE}


# ---------------------------------------------------------------------------
# M-ring
# ---------------------------------------------------------------------------


def mring_line(M: int, area: int, kind: int | str) -> int:
    if isinstance(kind, str):
        kind = KINDS[kind]
    return 5 * (area % M) + kind


def mring_kind(M: int, line_id: int) -> int:
    return line_id % 5


def make_mring(
    M: int,
    capacity: float | None = None,
    spacing_km: float = 100.0,
    spread_km: float = 10.0,
    inset_km: float = 8.0,
) -> Grid:
    """M self-sustained areas on a ring, joined by tie lines.

    Area ``i`` sits at angle ``2*pi*i/M`` on a circle whose circumference is
    ``M * spacing_km``.  Its two demand nodes lie on the circle ``spread_km``
    to either side; the generator sits ``inset_km`` inside.  With the
    defaults a disk of radius ~13.5 km around a generator touches exactly
    that area's six lines.
    """
    if M < 2:
        raise ValueError("M-ring needs M >= 2")
    R = M * spacing_km / (2 * math.pi)
    dphi = spread_km / R
    nodes = [None] * (3 * M)
    for i in range(M):
        phi = 2 * math.pi * i / M
        rg = R - inset_km
        nodes[i] = Node(i, SUPPLY, 2.0, rg * math.cos(phi), rg * math.sin(phi))
        for k, sgn in ((0, -1), (1, +1)):
            j = M + 2 * i + k
            a = phi + sgn * dphi
            nodes[j] = Node(j, DEMAND, 1.0, R * math.cos(a), R * math.sin(a))
    lines = []
    for i in range(M):
        even, odd = M + 2 * i, M + 2 * i + 1
        nxt = M + (2 * i + 2) % (2 * M)
        for a, b in ((i, even), (i, even), (i, odd), (i, odd), (odd, nxt)):
            lines.append(Line(len(lines), a, b, 1.0, capacity))
    return Grid(tuple(nodes), tuple(lines))


def area_failure(M: int, area: int) -> set[int]:
    """Four internal lines of the area plus both tie lines touching it."""
    i = area % M
    return {
        mring_line(M, i, EVEN),
        mring_line(M, i, EVEN_P),
        mring_line(M, i, ODD),
        mring_line(M, i, ODD_P),
        mring_line(M, i - 1, TIE),
        mring_line(M, i, TIE),
    }


def parallel_failure(M: int, area: int = 0) -> set[int]:
    return {mring_line(M, area, EVEN), mring_line(M, area, EVEN_P)}


def odd_even_failure(M: int, area: int = 0) -> set[int]:
    return {mring_line(M, area, EVEN), mring_line(M, area, ODD)}


def single_failure(M: int, area: int = 0) -> set[int]:
    return {mring_line(M, area, EVEN)}


def tie_internal_failure(M: int, area: int = 0) -> set[int]:
    """Even line of the area and the tie line feeding its even demand node."""
    return {mring_line(M, area, EVEN), mring_line(M, area - 1, TIE)}


def tie_lines(M: int) -> list[int]:
    return [mring_line(M, i, TIE) for i in range(M)]


def mring_without_ties(M: int, **kw) -> Grid:
    """The M-ring subgraph with every tie line dropped (ids renumbered)."""
    return make_mring(M, **kw).without_lines(tie_lines(M))


def arbitrarily_far_capacities(M: int) -> np.ndarray:
    """Capacity 1 everywhere except 0.5 on the odd pair of area M//2."""
    u = np.ones(5 * M)
    u[mring_line(M, M // 2, ODD)] = 0.5
    u[mring_line(M, M // 2, ODD_P)] = 0.5
    return u


def expected_singlefailure_flows(M: float) -> tuple[float, float, float, float]:
    """Magnitudes after line (0, M) fails: (parallel survivor, even, odd, tie)."""
    if M < 2:
        raise ValueError("M >= 2 required")
    if math.isinf(M):
        return (1.0, 0.5, 0.5, 0.0)
    y = 2 * M / (2 * M + 0.5)
    return (y, y / 2, 1 - y / 2, 1 - y)


# ---------------------------------------------------------------------------
# Q-graph
# ---------------------------------------------------------------------------


def qgraph_path_lengths(m: int) -> list[int]:
    return [2] + [2 ** (i - 1) for i in range(2, m + 1)]


def qgraph_paths(m: int) -> list[list[int]]:
    """Line ids of each path, in order from supply to demand."""
    out, start = [], 0
    for n in qgraph_path_lengths(m):
        out.append(list(range(start, start + n)))
        start += n
    return out


def make_qgraph(
    m: int,
    capacity: float | None = 0.5,
    width_km: float = 200.0,
    gap_km: float = 40.0,
) -> Grid:
    """Single supply and demand joined by m disjoint paths of x = 1 lines.

    Paths are drawn as trapezoids fanned alternately above and below the
    supply-demand axis, ``gap_km`` apart.
    """
    if m < 3:
        raise ValueError("Q-graph needs m >= 3")
    nodes = [Node(0, SUPPLY, 1.0, 0.0, 0.0), Node(1, DEMAND, 1.0, width_km, 0.0)]
    lines: list[Line] = []
    for k, n in enumerate(qgraph_path_lengths(m)):
        level = (k // 2 + 1) * (1 if k % 2 == 0 else -1)
        h = level * gap_km
        ramp = min(abs(h), width_km / 4)
        corners = np.array([(0, 0), (ramp, h), (width_km - ramp, h), (width_km, 0)], dtype=float)
        seg = np.linalg.norm(np.diff(corners, axis=0), axis=1)
        cum = np.concatenate([[0], np.cumsum(seg)])
        prev = 0
        for j in range(1, n):
            t = cum[-1] * j / n
            s = min(np.searchsorted(cum, t, side="right") - 1, 2)
            frac = (t - cum[s]) / seg[s]
            x, y = corners[s] + frac * (corners[s + 1] - corners[s])
            nid = len(nodes)
            nodes.append(Node(nid, NEUTRAL, 0.0, float(x), float(y)))
            lines.append(Line(len(lines), prev, nid, 1.0, capacity))
            prev = nid
        lines.append(Line(len(lines), prev, 1, 1.0, capacity))
    return Grid(tuple(nodes), tuple(lines))


def expected_qgraph_path_flow(m: int) -> float:
    """Total path-sum ``y`` of the intact Q-graph (every path carries f*x = y)."""
    return 1.0 / (1.5 - 1.0 / 2 ** (m - 1))


def expected_qgraph_round_flow(m: int, ell: int) -> float:
    """Path-sum after paths 1..ell are gone (ell >= 1)."""
    return 2 ** (m - 1) / (2 ** (m - ell) - 1)
