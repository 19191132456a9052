"""Grid data model, validation, and the line-oriented grid file format.

A grid file holds one record per line::

    node <id> <x_km> <y_km> supply <P> | demand <D> | neutral
    line <id> <from> <to> [x=<reactance>] [u=<capacity>]

``#`` starts a comment.  Node and line ids must be dense in ``[0, N)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc

SUPPLY = "supply"
DEMAND = "demand"
NEUTRAL = "neutral"
ROLES = (SUPPLY, DEMAND, NEUTRAL)

BALANCE_RTOL = 1e-9


class GridError(ValueError):
    """Base class for malformed or invalid grids."""


class GridParseError(GridError):
    pass


class GridValidationError(GridError):
    pass


class GridBalanceError(GridError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    role: str
    value: float  # P for supply, D for demand, 0 for neutral
    x: float = 0.0
    y: float = 0.0


@dataclass(frozen=True)
class Line:
    id: int
    src: int
    dst: int
    reactance: float
    capacity: float | None = None


@dataclass(frozen=True)
class TopologySpec:
    """Parameters naming a grid source: an M-ring, a Q-graph, or a file."""

    kind: str  # "mring" | "qgraph" | "file"
    value: int | str

    def __post_init__(self):
        if self.kind == "mring" and int(self.value) < 2:
            raise GridValidationError("M-ring needs M >= 2")
        if self.kind == "qgraph" and int(self.value) < 3:
            raise GridValidationError("Q-graph needs m >= 3")
        if self.kind not in ("mring", "qgraph", "file"):
            raise GridValidationError(f"unknown topology kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable grid: nodes with roles and planar coordinates, plus lines.

    Arrays derived from the records are computed once and cached; treat them
    as read-only.
    """

    nodes: tuple[Node, ...]
    lines: tuple[Line, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "lines", tuple(self.lines))
        validate(self)

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return self.nodes == other.nodes and self.lines == other.lines

    def __hash__(self):
        return hash((self.nodes, self.lines))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def _cached(self, key, fn):
        if key not in self._cache:
            arr = fn()
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)
            self._cache[key] = arr
        return self._cache[key]

    @property
    def src(self) -> np.ndarray:
        return self._cached("src", lambda: np.array([l.src for l in self.lines], dtype=np.int64))

    @property
    def dst(self) -> np.ndarray:
        return self._cached("dst", lambda: np.array([l.dst for l in self.lines], dtype=np.int64))

    @property
    def reactance(self) -> np.ndarray:
        return self._cached("x", lambda: np.array([l.reactance for l in self.lines], dtype=float))

    @property
    def capacity(self) -> np.ndarray:
        """Per-line capacity, NaN where unset."""
        return self._cached(
            "u",
            lambda: np.array(
                [np.nan if l.capacity is None else l.capacity for l in self.lines], dtype=float
            ),
        )

    @property
    def has_capacities(self) -> bool:
        return all(l.capacity is not None for l in self.lines)

    @property
    def supply(self) -> np.ndarray:
        return self._cached(
            "P", lambda: np.array([n.value if n.role == SUPPLY else 0.0 for n in self.nodes])
        )

    @property
    def demand(self) -> np.ndarray:
        return self._cached(
            "D", lambda: np.array([n.value if n.role == DEMAND else 0.0 for n in self.nodes])
        )

    @property
    def coords(self) -> np.ndarray:
        return self._cached("xy", lambda: np.array([(n.x, n.y) for n in self.nodes], dtype=float).reshape(-1, 2))

    def injection(self) -> np.ndarray:
        return self.supply - self.demand

    def with_capacities(self, capacities) -> Grid:
        caps = np.asarray(capacities, dtype=float)
        if caps.shape != (self.n_lines,):
            raise GridValidationError("capacity vector length does not match line count")
        lines = tuple(replace(l, capacity=float(c)) for l, c in zip(self.lines, caps))
        return Grid(self.nodes, lines)

    def without_lines(self, removed: Iterable[int]) -> Grid:
        """Drop lines and renumber the survivors densely (keeps relative order)."""
        gone = set(removed)
        kept = [l for l in self.lines if l.id not in gone]
        lines = tuple(replace(l, id=k) for k, l in enumerate(kept))
        return Grid(self.nodes, lines)

    def alive_mask(self, alive=None, removed=None) -> np.ndarray:
        """Boolean line mask from either a set of alive ids or a set of removed ids."""
        if alive is not None and removed is not None:
            raise ValueError("pass alive or removed, not both")
        if alive is None:
            mask = np.ones(self.n_lines, dtype=bool)
            if removed is not None:
                idx = np.fromiter(removed, dtype=np.int64)
                _check_ids(idx, self.n_lines)
                mask[idx] = False
            return mask
        if isinstance(alive, np.ndarray) and alive.dtype == bool:
            if alive.shape != (self.n_lines,):
                raise ValueError("alive mask has wrong length")
            return alive.copy()
        mask = np.zeros(self.n_lines, dtype=bool)
        idx = np.fromiter(alive, dtype=np.int64)
        _check_ids(idx, self.n_lines)
        mask[idx] = True
        return mask


def _check_ids(idx: np.ndarray, n: int) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise GridValidationError(f"line id out of range [0, {n})")


def make_node(node_id: int, role: str, value: float = 0.0, x: float = 0.0, y: float = 0.0) -> Node:
    """Build a node, normalizing zero-valued supply/demand to neutral."""
    if role not in ROLES:
        raise GridValidationError(f"node {node_id}: unknown role {role!r}")
    value = float(value)
    if role == NEUTRAL or value == 0.0:
        return Node(node_id, NEUTRAL, 0.0, float(x), float(y))
    if value < 0 or not math.isfinite(value):
        raise GridValidationError(f"node {node_id}: {role} value must be positive, got {value}")
    return Node(node_id, role, value, float(x), float(y))


def validate(grid: Grid) -> None:
    for k, n in enumerate(grid.nodes):
        if n.id != k:
            raise GridValidationError(f"node ids must be dense and sorted; position {k} holds {n.id}")
        if n.role not in ROLES:
            raise GridValidationError(f"node {n.id}: unknown role {n.role!r}")
        if n.role != NEUTRAL and not n.value > 0:
            raise GridValidationError(f"node {n.id}: {n.role} value must be > 0")
        if not (math.isfinite(n.x) and math.isfinite(n.y)):
            raise GridValidationError(f"node {n.id}: coordinates must be finite")
    nn = len(grid.nodes)
    for k, l in enumerate(grid.lines):
        if l.id != k:
            raise GridValidationError(f"line ids must be dense and sorted; position {k} holds {l.id}")
        if not (0 <= l.src < nn) or not (0 <= l.dst < nn):
            raise GridValidationError(f"line {l.id}: endpoint references a missing node")
        if l.src == l.dst:
            raise GridValidationError(f"line {l.id}: self-loop")
        if not (l.reactance > 0 and math.isfinite(l.reactance)):
            raise GridValidationError(f"line {l.id}: reactance must be positive")
        if l.capacity is not None and not (l.capacity >= 0 and math.isfinite(l.capacity)):
            raise GridValidationError(f"line {l.id}: capacity must be a finite value >= 0")


# ---------------------------------------------------------------------------
# Topology queries
# ---------------------------------------------------------------------------


def component_labels(grid: Grid, alive: np.ndarray) -> tuple[int, np.ndarray]:
    """Label nodes by connected component of the alive subgraph.

    Labels are canonical: components are numbered in order of their smallest
    node id, so label 0 always contains node 0.
    """
    n = grid.n_nodes
    if n == 0:
        return 0, np.zeros(0, dtype=np.int64)
    s = grid.src[alive]
    d = grid.dst[alive]
    adj = coo_matrix((np.ones(s.size), (s, d)), shape=(n, n))
    ncomp, raw = _cc(adj, directed=False)
    # renumber by first appearance
    first = np.full(ncomp, n, dtype=np.int64)
    np.minimum.at(first, raw, np.arange(n))
    order = np.argsort(first, kind="stable")
    remap = np.empty(ncomp, dtype=np.int64)
    remap[order] = np.arange(ncomp)
    return ncomp, remap[raw]


def connected_components(grid: Grid, removed: Iterable[int] = ()) -> list[list[int]]:
    """Partition nodes into components after removing ``removed`` lines."""
    ncomp, labels = component_labels(grid, grid.alive_mask(removed=removed))
    comps: list[list[int]] = [[] for _ in range(ncomp)]
    for node, lab in enumerate(labels):
        comps[lab].append(node)
    return comps


@dataclass(frozen=True)
class ComponentBalance:
    nodes: tuple[int, ...]
    supply: float
    demand: float

    @property
    def balanced(self) -> bool:
        scale = max(self.supply, self.demand, 1.0)
        return abs(self.supply - self.demand) <= BALANCE_RTOL * scale


def balance_check(grid: Grid, removed: Iterable[int] = ()) -> list[ComponentBalance]:
    out = []
    P, D = grid.supply, grid.demand
    for comp in connected_components(grid, removed):
        idx = np.asarray(comp, dtype=np.int64)
        out.append(ComponentBalance(tuple(comp), float(P[idx].sum()), float(D[idx].sum())))
    return out


def require_balanced(grid: Grid) -> None:
    bad = [c for c in balance_check(grid) if not c.balanced]
    if bad:
        c = bad[0]
        raise GridBalanceError(
            f"{len(bad)} unbalanced component(s); e.g. nodes starting at {c.nodes[0]}: "
            f"supply {c.supply} vs demand {c.demand}"
        )


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def _num(tok: str, where: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise GridParseError(f"{where}: expected a number, got {tok!r}") from None
    return v


def _int(tok: str, where: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise GridParseError(f"{where}: expected an integer id, got {tok!r}") from None


def parse_grid(text: str, source: str = "<string>", balanced: bool = False) -> Grid:
    nodes: dict[int, Node] = {}
    raw_lines: dict[int, tuple[int, int, float | None, float | None, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        tok = body.split()
        kind = tok[0]
        if kind == "node":
            if len(tok) < 5:
                raise GridParseError(f"{where}: node record needs id, x, y, role")
            nid = _int(tok[1], where)
            x, y = _num(tok[2], where), _num(tok[3], where)
            role = tok[4]
            if role in (SUPPLY, DEMAND):
                if len(tok) != 6:
                    raise GridParseError(f"{where}: {role} needs exactly one value")
                value = _num(tok[5], where)
            elif role == NEUTRAL:
                if len(tok) != 5:
                    raise GridParseError(f"{where}: neutral takes no value")
                value = 0.0
            else:
                raise GridParseError(f"{where}: unknown role {role!r}")
            if nid in nodes:
                raise GridParseError(f"{where}: duplicate node id {nid}")
            try:
                nodes[nid] = make_node(nid, role, value, x, y)
            except GridValidationError as e:
                raise GridValidationError(f"{where}: {e}") from None
        elif kind == "line":
            if len(tok) < 4:
                raise GridParseError(f"{where}: line record needs id, from, to")
            lid = _int(tok[1], where)
            a, b = _int(tok[2], where), _int(tok[3], where)
            xv = uv = None
            for opt in tok[4:]:
                key, sep, val = opt.partition("=")
                if not sep or key not in ("x", "u"):
                    raise GridParseError(f"{where}: bad line option {opt!r}")
                if key == "x":
                    xv = _num(val, where)
                else:
                    uv = _num(val, where)
            if lid in raw_lines:
                raise GridParseError(f"{where}: duplicate line id {lid}")
            raw_lines[lid] = (a, b, xv, uv, where)
        else:
            raise GridParseError(f"{where}: unknown record type {kind!r}")

    if sorted(nodes) != list(range(len(nodes))):
        raise GridValidationError(f"{source}: node ids must be dense in [0, N)")
    if sorted(raw_lines) != list(range(len(raw_lines))):
        raise GridValidationError(f"{source}: line ids must be dense in [0, L)")

    lines = []
    for lid in range(len(raw_lines)):
        a, b, xv, uv, where = raw_lines[lid]
        if a not in nodes or b not in nodes:
            raise GridValidationError(f"{where}: line {lid} references a missing node")
        if xv is None:
            xv = math.hypot(nodes[a].x - nodes[b].x, nodes[a].y - nodes[b].y)
        lines.append(Line(lid, a, b, xv, uv))
    try:
        grid = Grid(tuple(nodes[i] for i in range(len(nodes))), tuple(lines))
    except GridValidationError as e:
        raise GridValidationError(f"{source}: {e}") from None
    if balanced:
        require_balanced(grid)
    return grid


def load_grid(path, balanced: bool = False) -> Grid:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise GridError(f"cannot read grid file {path}: {e.strerror or e}") from None
    return parse_grid(text, str(path), balanced=balanced)


def _fmt(v: float) -> str:
    return repr(float(v))


def serialize_grid(grid: Grid) -> str:
    out = []
    for n in grid.nodes:
        role = n.role if n.role == NEUTRAL else f"{n.role} {_fmt(n.value)}"
        out.append(f"node {n.id} {_fmt(n.x)} {_fmt(n.y)} {role}")
    for l in grid.lines:
        rec = f"line {l.id} {l.src} {l.dst} x={_fmt(l.reactance)}"
        if l.capacity is not None:
            rec += f" u={_fmt(l.capacity)}"
        out.append(rec)
    return "\n".join(out) + "\n"


def save_grid(grid: Grid, path) -> None:
    Path(path).write_text(serialize_grid(grid), encoding="utf-8")
