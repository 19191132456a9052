"""Geographically correlated failures.

A failure is a disk of radius ``r``; it takes out every line whose segment
comes within ``r`` of the center.  The set of points within ``r`` of a
segment is its hippodrome.  Candidate epicenters are the vertices of the
arrangement of all hippodromes: pairwise boundary intersections, the joints
where a hippodrome's straight sides meet its end caps, and one interior
point per hippodrome.  Any point's affected set is contained in the affected
set of some candidate.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cascade import CascadeConfig, run
from .gridcore import Grid

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
GEOM_TOL = 1e-9  # km
DEDUP_TOL = 1e-6  # km

TWO_PI = 2 * math.pi


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def _check_latlon(lat, lon):
    if not (-90 <= lat <= 90 and -180 <= lon <= 180):
        raise ValueError(f"invalid coordinates lat={lat}, lon={lon}")


def great_circle_km(p, q) -> float:
    (lat1, lon1), (lat2, lon2) = p, q
    f1, f2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    h = math.sin((f2 - f1) / 2) ** 2 + math.cos(f1) * math.cos(f2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def project(p, reference) -> tuple[float, float]:
    """(lat, lon) degrees -> planar (x, y) km by distance and bearing from ``reference``."""
    _check_latlon(*p)
    _check_latlon(*reference)
    d = great_circle_km(reference, p)
    if d == 0:
        return (0.0, 0.0)
    f1, f2 = math.radians(reference[0]), math.radians(p[0])
    dl = math.radians(p[1] - reference[1])
    beta = math.atan2(math.sin(dl) * math.cos(f2), math.cos(f1) * math.sin(f2) - math.sin(f1) * math.cos(f2) * math.cos(dl))
    return (d * math.sin(beta), d * math.cos(beta))


# ---------------------------------------------------------------------------
# Distances and affected sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeoEvent:
    x: float
    y: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("event radius must be > 0")


def segments(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    xy = grid.coords
    return xy[grid.src], xy[grid.dst]


def point_segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances, shape (n_points, n_segments)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    ab = b - a
    den = np.einsum("ij,ij->i", ab, ab)
    safe = np.where(den > 0, den, 1.0)
    ap = pts[:, None, :] - a[None, :, :]
    t = np.einsum("pij,ij->pi", ap, ab) / safe
    t = np.clip(np.where(den > 0, t, 0.0), 0.0, 1.0)
    close = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(pts[:, None, :] - close, axis=2)


def affected_lines(grid: Grid, event: GeoEvent, tol: float = GEOM_TOL) -> set[int]:
    a, b = segments(grid)
    if a.shape[0] == 0:
        return set()
    d = point_segment_distance([(event.x, event.y)], a, b)[0]
    return set(int(i) for i in np.flatnonzero(d <= event.radius + tol))


def affected_matrix(pts, a, b, r, tol: float = GEOM_TOL) -> np.ndarray:
    return point_segment_distance(pts, a, b) <= r + tol


# ---------------------------------------------------------------------------
# Hippodrome boundary pieces and their intersections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Seg:
    p: tuple[float, float]
    q: tuple[float, float]


@dataclass(frozen=True)
class _Arc:
    c: tuple[float, float]
    r: float
    start: float  # radians
    sweep: float  # counterclockwise extent

    def contains_angle(self, phi: float, tol: float) -> bool:
        rel = (phi - self.start) % TWO_PI
        slack = tol / self.r
        return rel <= self.sweep + slack or rel >= TWO_PI - slack

    def endpoints(self):
        out = []
        for ang in (self.start, self.start + self.sweep):
            out.append((self.c[0] + self.r * math.cos(ang), self.c[1] + self.r * math.sin(ang)))
        return out


def hippodrome_pieces(p, q, r: float):
    """Boundary of the r-neighbourhood of segment pq: two sides, two caps."""
    px, py = p
    qx, qy = q
    dx, dy = qx - px, qy - py
    L = math.hypot(dx, dy)
    if L <= GEOM_TOL:
        return [_Arc((px, py), r, 0.0, TWO_PI)]
    dx, dy = dx / L, dy / L
    nx, ny = -dy, dx
    a_n = math.atan2(ny, nx)
    return [
        _Seg((px + r * nx, py + r * ny), (qx + r * nx, qy + r * ny)),
        _Seg((px - r * nx, py - r * ny), (qx - r * nx, qy - r * ny)),
        _Arc((px, py), r, a_n, math.pi),
        _Arc((qx, qy), r, a_n + math.pi, math.pi),
    ]


def joints(pieces) -> list[tuple[float, float]]:
    pts = []
    for pc in pieces:
        if isinstance(pc, _Seg):
            pts.extend([pc.p, pc.q])
        elif pc.sweep < TWO_PI:
            pts.extend(pc.endpoints())
        else:
            pts.append((pc.c[0] + pc.r, pc.c[1]))
    return pts


def _seg_seg(s: _Seg, t: _Seg, tol: float):
    (x1, y1), (x2, y2) = s.p, s.q
    (x3, y3), (x4, y4) = t.p, t.q
    rx, ry = x2 - x1, y2 - y1
    sx, sy = x4 - x3, y4 - y3
    den = rx * sy - ry * sx
    qpx, qpy = x3 - x1, y3 - y1
    rr = rx * rx + ry * ry
    if abs(den) <= tol * math.sqrt(rr * (sx * sx + sy * sy)):
        # parallel; overlapping only if collinear
        if abs(qpx * ry - qpy * rx) > tol * math.sqrt(rr):
            return []
        t0 = (qpx * rx + qpy * ry) / rr
        t1 = t0 + (sx * rx + sy * ry) / rr
        lo, hi = max(0.0, min(t0, t1)), min(1.0, max(t0, t1))
        if lo > hi + tol / math.sqrt(rr):
            return []
        return [(x1 + lo * rx, y1 + lo * ry), (x1 + hi * rx, y1 + hi * ry)]
    u = (qpx * sy - qpy * sx) / den
    v = (qpx * ry - qpy * rx) / den
    eu, ev = tol / math.sqrt(rr), tol / math.hypot(sx, sy)
    if -eu <= u <= 1 + eu and -ev <= v <= 1 + ev:
        return [(x1 + u * rx, y1 + u * ry)]
    return []


def _seg_arc(s: _Seg, a: _Arc, tol: float):
    (x1, y1), (x2, y2) = s.p, s.q
    cx, cy = a.c
    dx, dy = x2 - x1, y2 - y1
    fx, fy = x1 - cx, y1 - cy
    A = dx * dx + dy * dy
    B = 2 * (fx * dx + fy * dy)
    C = fx * fx + fy * fy - a.r * a.r
    disc = B * B - 4 * A * C
    # tangency: allow a slightly negative discriminant
    if disc < -4 * A * (2 * a.r * tol):
        return []
    sq = math.sqrt(max(disc, 0.0))
    ts = {(-B - sq) / (2 * A), (-B + sq) / (2 * A)}
    et = tol / math.sqrt(A)
    out = []
    for t in sorted(ts):
        if -et <= t <= 1 + et:
            x, y = x1 + t * dx, y1 + t * dy
            if a.contains_angle(math.atan2(y - cy, x - cx), tol):
                out.append((x, y))
    return out


def _arc_arc(a: _Arc, b: _Arc, tol: float):
    (x1, y1), (x2, y2) = a.c, b.c
    dx, dy = x2 - x1, y2 - y1
    d = math.hypot(dx, dy)
    if d <= tol and abs(a.r - b.r) <= tol:
        # same circle: overlap ends are arc endpoints lying on the other arc
        out = []
        for arc, other in ((a, b), (b, a)):
            for (x, y) in (arc.endpoints() if arc.sweep < TWO_PI else []):
                if other.contains_angle(math.atan2(y - other.c[1], x - other.c[0]), tol):
                    out.append((x, y))
        return out
    if d <= tol or d > a.r + b.r + tol or d < abs(a.r - b.r) - tol:
        return []
    h_along = (a.r * a.r - b.r * b.r + d * d) / (2 * d)
    h2 = a.r * a.r - h_along * h_along
    h = math.sqrt(max(h2, 0.0))
    mx, my = x1 + h_along * dx / d, y1 + h_along * dy / d
    pts = {(mx - h * dy / d, my + h * dx / d), (mx + h * dy / d, my - h * dx / d)}
    out = []
    for (x, y) in sorted(pts):
        if a.contains_angle(math.atan2(y - y1, x - x1), tol) and b.contains_angle(math.atan2(y - y2, x - x2), tol):
            out.append((x, y))
    return out


def piece_intersections(pa, pb, tol: float = GEOM_TOL):
    if isinstance(pa, _Seg) and isinstance(pb, _Seg):
        return _seg_seg(pa, pb, tol)
    if isinstance(pa, _Seg):
        return _seg_arc(pa, pb, tol)
    if isinstance(pb, _Seg):
        return _seg_arc(pb, pa, tol)
    return _arc_arc(pa, pb, tol)


def _pt_seg(px, py, ax, ay, bx, by) -> float:
    dx, dy = bx - ax, by - ay
    den = dx * dx + dy * dy
    t = 0.0 if den == 0 else min(1.0, max(0.0, ((px - ax) * dx + (py - ay) * dy) / den))
    return math.hypot(px - ax - t * dx, py - ay - t * dy)


def _segment_distance(a0, a1, b0, b1) -> float:
    a0, a1, b0, b1 = (tuple(map(float, v)) for v in (a0, a1, b0, b1))
    if _seg_seg(_Seg(a0, a1), _Seg(b0, b1), 0.0) if a0 != a1 and b0 != b1 else False:
        return 0.0
    return min(
        _pt_seg(*a0, *b0, *b1),
        _pt_seg(*a1, *b0, *b1),
        _pt_seg(*b0, *a0, *a1),
        _pt_seg(*b1, *a0, *a1),
    )


def _close_pairs(a: np.ndarray, b: np.ndarray, r: float, ids: np.ndarray):
    """Pairs (i, j), i < j in global ids, whose hippodromes can meet."""
    lo = np.minimum(a, b) - r - GEOM_TOL
    hi = np.maximum(a, b) + r + GEOM_TOL
    n = len(ids)
    order = np.argsort(ids)
    for ii in range(n):
        i = order[ii]
        js = order[ii + 1:]
        if js.size == 0:
            continue
        ok = np.all(lo[js] <= hi[i], axis=1) & np.all(hi[js] >= lo[i], axis=1)
        for j in js[ok]:
            if _segment_distance(a[i], b[i], a[j], b[j]) <= 2 * r + GEOM_TOL:
                yield i, j


def vertex_points(a: np.ndarray, b: np.ndarray, r: float, ids: np.ndarray | None = None) -> np.ndarray:
    """Raw candidate points for the given segments (duplicates included)."""
    n = a.shape[0]
    if ids is None:
        ids = np.arange(n)
    pieces = [hippodrome_pieces(tuple(a[k]), tuple(b[k]), r) for k in range(n)]
    pts: list[tuple[float, float]] = []
    for k in range(n):
        pts.extend(joints(pieces[k]))
        pts.append(tuple((a[k] + b[k]) / 2))
    for i, j in _close_pairs(a, b, r, ids):
        for pi in pieces[i]:
            for pj in pieces[j]:
                pts.extend(piece_intersections(pi, pj))
    return np.array(pts, dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class Candidate:
    x: float
    y: float
    affected: frozenset

    @property
    def point(self):
        return (self.x, self.y)


def _dedup(points: np.ndarray, aff: np.ndarray) -> list[Candidate]:
    """Merge points within DEDUP_TOL that share an affected set."""
    if points.shape[0] == 0:
        return []
    order = np.lexsort((points[:, 1], points[:, 0]))
    points, aff = points[order], aff[order]
    keep = np.ones(len(points), dtype=bool)
    tree = cKDTree(points)
    # ball queries from kept points only: stacked parallel lines yield
    # thousands of coincident points, where all-pairs would be quadratic
    for i in range(len(points)):
        if not keep[i]:
            continue
        near = np.asarray(tree.query_ball_point(points[i], DEDUP_TOL), dtype=int)
        near = near[near > i]
        keep[near[(aff[near] == aff[i]).all(axis=1)]] = False
    out = []
    for k in np.flatnonzero(keep):
        out.append(Candidate(float(points[k, 0]), float(points[k, 1]), frozenset(int(i) for i in np.flatnonzero(aff[k]))))
    return out


def _affected_chunks(pts, a, b, r, chunk=4096):
    out = np.zeros((pts.shape[0], a.shape[0]), dtype=bool)
    for s in range(0, pts.shape[0], chunk):
        out[s:s + chunk] = affected_matrix(pts[s:s + chunk], a, b, r)
    return out


def candidates(grid: Grid, r: float) -> list[Candidate]:
    """Arrangement vertices plus witness points, sorted by (x, y)."""
    if not r > 0:
        raise ValueError("radius must be > 0")
    a, b = segments(grid)
    pts = vertex_points(a, b, r)
    return _dedup(pts, _affected_chunks(pts, a, b, r))


def _section_task(args):
    a, b, r, ids, cell, size = args
    pts = vertex_points(a[ids], b[ids], r, ids)
    if pts.shape[0] == 0:
        return pts
    inside = np.all(np.floor(pts / size) == np.asarray(cell), axis=1)
    return pts[inside]


def sectioned_candidates(grid: Grid, r: float, section_km: float, jobs: int = 1) -> list[Candidate]:
    """Same family as :func:`candidates`, computed per square section.

    Each section sees the lines within ``2r`` of it, and keeps only the
    vertices that fall inside it.
    """
    if not section_km > 0:
        raise ValueError("section size must be > 0")
    a, b = segments(grid)
    if a.shape[0] == 0:
        return []
    lo = np.minimum(a, b) - 2 * r
    hi = np.maximum(a, b) + 2 * r
    c_lo = np.floor(lo / section_km).astype(int)
    c_hi = np.floor(hi / section_km).astype(int)
    cells: dict[tuple[int, int], list[int]] = {}
    for k in range(a.shape[0]):
        for cx in range(c_lo[k, 0], c_hi[k, 0] + 1):
            for cy in range(c_lo[k, 1], c_hi[k, 1] + 1):
                cells.setdefault((cx, cy), []).append(k)
    tasks = [(a, b, r, np.array(ids), cell, section_km) for cell, ids in sorted(cells.items())]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_section_task, tasks))
    else:
        parts = [_section_task(t) for t in tasks]
    pts = np.concatenate([p for p in parts if p.size] or [np.zeros((0, 2))])
    return _dedup(pts, _affected_chunks(pts, a, b, r))


def unique_events(cands: list[Candidate]) -> list[Candidate]:
    """One candidate per distinct non-empty affected set (smallest (x, y) wins)."""
    seen = {}
    for c in sorted(cands, key=lambda c: (c.x, c.y)):
        if c.affected and c.affected not in seen:
            seen[c.affected] = c
    return sorted(seen.values(), key=lambda c: (c.x, c.y))


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepResult:
    x: float
    y: float
    affected: tuple[int, ...]
    yield_: float | None
    rounds: int | None
    faulted: int | None
    components: int | None
    stable: bool | None = None
    error: str | None = None

    def as_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "affected": list(self.affected),
            "yield": self.yield_,
            "rounds": self.rounds,
            "faulted": self.faulted,
            "components": self.components,
            "stable": self.stable,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SweepResult:
        return cls(d["x"], d["y"], tuple(d["affected"]), d["yield"], d["rounds"], d["faulted"],
                   d["components"], d.get("stable"), d.get("error"))


def _evaluate(args) -> SweepResult:
    grid, cand, config = args
    aff = tuple(sorted(cand.affected))
    try:
        rep = run(grid, aff, config)
    except Exception as e:  # recorded per candidate; the sweep goes on
        return SweepResult(cand.x, cand.y, aff, None, None, None, None, None, f"{type(e).__name__}: {e}")
    return SweepResult(cand.x, cand.y, aff, rep.yield_, rep.rounds_to_stability, rep.total_faulted,
                       rep.final_components, rep.stable)


def _result_path(workdir: Path, cand: Candidate) -> Path:
    key = json.dumps([repr(cand.x), repr(cand.y), sorted(cand.affected)])
    return workdir / f"cand-{hashlib.sha256(key.encode()).hexdigest()[:20]}.json"


def sweep(
    grid: Grid,
    r: float,
    config: CascadeConfig = CascadeConfig(),
    capacities=None,
    section_km: float | None = None,
    jobs: int = 1,
    workdir=None,
    progress=None,
) -> list[SweepResult]:
    """Run the cascade from every distinct candidate epicenter.

    With ``workdir`` each result is written to its own file and reused on a
    later call, so an interrupted sweep resumes where it stopped.
    """
    if capacities is not None:
        grid = grid.with_capacities(capacities)
    if section_km:
        cands = sectioned_candidates(grid, r, section_km, jobs)
    else:
        cands = candidates(grid, r)
    events = unique_events(cands)
    log.info("sweep: %d candidate points, %d distinct events", len(cands), len(events))

    results: list[SweepResult | None] = [None] * len(events)
    todo = []
    if workdir is not None:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
    for k, c in enumerate(events):
        if workdir is not None and _result_path(workdir, c).exists():
            results[k] = SweepResult.from_dict(json.loads(_result_path(workdir, c).read_text()))
        else:
            todo.append(k)
    if len(todo) < len(events):
        log.info("sweep: resuming, %d of %d already done", len(events) - len(todo), len(events))

    tasks = [(grid, events[k], config) for k in todo]
    if jobs > 1 and len(tasks) > 1:
        ex = ProcessPoolExecutor(max_workers=jobs)
        it = ex.map(_evaluate, tasks, chunksize=max(1, len(tasks) // (4 * jobs)))
    else:
        ex = None
        it = map(_evaluate, tasks)
    try:
        for done, (k, res) in enumerate(zip(todo, it), 1):
            results[k] = res
            if res.error:
                log.warning("candidate (%.6g, %.6g) failed: %s", res.x, res.y, res.error)
            if workdir is not None:
                _result_path(workdir, events[k]).write_text(json.dumps(res.as_dict(), sort_keys=True))
            if progress is not None:
                progress(done, len(tasks))
    finally:
        if ex is not None:
            ex.shutdown()
    return results


SWEEP_COLUMNS = ["x", "y", "n_affected", "yield", "rounds", "faulted", "components"]


def _cell(v):
    return "" if v is None else repr(v)


def sweep_csv(results: list[SweepResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS + ["error"])
    for s in results:
        w.writerow([repr(s.x), repr(s.y), len(s.affected), _cell(s.yield_), _cell(s.rounds),
                    _cell(s.faulted), _cell(s.components), s.error or ""])
    return buf.getvalue()


def sweep_geojson(results: list[SweepResult]) -> str:
    feats = []
    for s in results:
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [s.x, s.y]},
            "properties": {
                "n_affected": len(s.affected),
                "affected": list(s.affected),
                "yield": s.yield_,
                "rounds": s.rounds,
                "faulted": s.faulted,
                "components": s.components,
                "error": s.error,
            },
        })
    return json.dumps({"type": "FeatureCollection", "features": feats}, indent=1, sort_keys=True) + "\n"
