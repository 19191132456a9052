"""Command-line driver.

Most subcommands take a SOURCE that is either a grid file or a scenario
file.  A scenario is flat ``key = value`` text::

    grid = ring4.grid        # relative to the scenario file
    provision = n-1          # n, n-1 or none (keep the file's capacities)
    fos = 1.2
    fail = 0,1               # or: event = x,y with radius = r; or: sweep = yes
    alpha = 1
    epsilon = 0
    p = 0
    seed = 0
    max_rounds = 1000
    output = out/

Command-line flags override scenario values.  Exit status: 0 when every
cascade reached stability, 2 when one hit the round cap, 1 on error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__, cascade, control, fixtures, geo, provisioning
from .cascade import CascadeConfig
from .gridcore import Grid, GridError, load_grid, serialize_grid

log = logging.getLogger("gridcascade")

EXIT_OK, EXIT_ERROR, EXIT_CAP = 0, 1, 2

SCENARIO_KEYS = {
    "grid", "provision", "fos", "fail", "event", "radius", "sweep", "section_km",
    "alpha", "epsilon", "p", "seed", "max_rounds", "output", "runs", "alphas", "rounds",
}


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    grid: Path
    provision: str | None = None  # None keeps the file's capacities
    fos: float = 1.2
    fail: tuple[int, ...] | None = None
    event: tuple[float, float] | None = None
    radius: float | None = None
    sweep: bool = False
    section_km: float | None = None
    config: CascadeConfig = field(default_factory=CascadeConfig)
    output: Path | None = None
    extra: dict[str, str] = field(default_factory=dict)

    def failure_kinds(self) -> list[str]:
        return [k for k, v in (("fail", self.fail), ("event", self.event), ("sweep", self.sweep or None)) if v is not None]


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


def _ints(text: str, what: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError:
        raise ScenarioError(f"{what}: expected comma-separated integers, got {text!r}") from None


def _floats(text: str, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError:
        raise ScenarioError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _bool(text: str, what: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off", ""):
        return False
    raise ScenarioError(f"{what}: expected yes/no, got {text!r}")


def _provision_kind(text: str, what: str) -> str | None:
    t = text.strip().lower()
    if t in ("none", "keep", ""):
        return None
    if t in ("n", "n-1"):
        return t
    raise ScenarioError(f"{what}: provision must be n, n-1 or none, got {text!r}")


def is_scenario_text(text: str) -> bool:
    for raw in text.splitlines():
        body = raw.split("#", 1)[0].strip()
        if body:
            return body.split()[0] not in ("node", "line")
    return False


def parse_scenario(text: str, source: str = "<scenario>", base: Path | None = None) -> Scenario:
    base = base or Path(".")
    kv: dict[str, tuple[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, val = body.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ScenarioError(f"{where}: expected key = value")
        if key not in SCENARIO_KEYS:
            raise ScenarioError(f"{where}: unknown key {key!r}")
        if key in kv:
            raise ScenarioError(f"{where}: duplicate key {key!r}")
        kv[key] = (val.strip(), where)
    if "grid" not in kv:
        raise ScenarioError(f"{source}: missing required key 'grid'")

    def num(key, conv, default):
        if key not in kv:
            return default
        v, where = kv[key]
        try:
            return conv(v)
        except ValueError:
            raise ScenarioError(f"{where}: {key} must be a number, got {v!r}") from None

    sc = Scenario(grid=base / kv["grid"][0])
    if "provision" in kv:
        sc.provision = _provision_kind(*kv["provision"])
    sc.fos = num("fos", float, sc.fos)
    if "fail" in kv:
        sc.fail = _ints(*kv["fail"])
    if "event" in kv:
        xy = _floats(*kv["event"])
        if len(xy) != 2:
            raise ScenarioError(f"{kv['event'][1]}: event needs x,y")
        sc.event = (xy[0], xy[1])
    sc.radius = num("radius", float, None)
    if "sweep" in kv:
        sc.sweep = _bool(*kv["sweep"])
    sc.section_km = num("section_km", float, None)
    try:
        sc.config = CascadeConfig(
            alpha=num("alpha", float, 1.0),
            epsilon=num("epsilon", float, 0.0),
            p=num("p", float, 0.0),
            seed=num("seed", int, 0),
            max_rounds=num("max_rounds", int, 1000),
        )
    except ValueError as e:
        raise ScenarioError(f"{source}: {e}") from None
    if "output" in kv:
        sc.output = base / kv["output"][0]
    sc.extra = {k: v for k, (v, _) in kv.items() if k in ("runs", "alphas", "rounds")}
    return sc


def load_source(path: str) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise GridError(f"cannot read {p}: {e.strerror or e}") from None
    if is_scenario_text(text):
        return parse_scenario(text, str(p), p.parent)
    return Scenario(grid=p)


def apply_flags(sc: Scenario, args) -> Scenario:
    """Command-line flags win over scenario values."""
    cfg = {}
    for key in ("alpha", "epsilon", "p", "seed", "max_rounds"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if cfg:
        sc.config = replace(sc.config, **cfg)
    if getattr(args, "provision", None) is not None:
        sc.provision = _provision_kind(args.provision, "--provision")
    if getattr(args, "fos", None) is not None:
        sc.fos = args.fos
    if getattr(args, "fail", None) is not None:
        sc.fail, sc.event, sc.sweep = _ints(args.fail, "--fail"), None, False
    if getattr(args, "event", None) is not None:
        xy = _floats(args.event, "--event")
        if len(xy) != 2:
            raise ScenarioError("--event needs x,y")
        sc.event, sc.fail, sc.sweep = (xy[0], xy[1]), None, False
    if getattr(args, "radius", None) is not None:
        sc.radius = args.radius
    if getattr(args, "section_km", None) is not None:
        sc.section_km = args.section_km
    if getattr(args, "output", None) is not None:
        sc.output = Path(args.output)
    return sc


def prepare_grid(sc: Scenario, jobs: int) -> Grid:
    grid = load_grid(sc.grid, balanced=True)
    if sc.provision is not None:
        spec = provisioning.ProvisioningSpec(k=0 if sc.provision == "n" else 1, fos=sc.fos)
        grid = provisioning.provision(grid, spec, jobs=jobs)
    elif not grid.has_capacities:
        raise ScenarioError(f"{sc.grid}: some lines have no capacity; pass --provision n or n-1")
    return grid


def resolve_failure(sc: Scenario, grid: Grid) -> tuple[int, ...]:
    kinds = [k for k in sc.failure_kinds() if k != "sweep"]
    if len(kinds) > 1:
        raise ScenarioError("give exactly one of fail, event or sweep")
    if sc.event is not None:
        if sc.radius is None:
            raise ScenarioError("a geographic event needs a radius")
        return tuple(sorted(geo.affected_lines(grid, geo.GeoEvent(sc.event[0], sc.event[1], sc.radius))))
    if sc.fail is None:
        raise ScenarioError("no failure given (fail = ids, or event = x,y with radius)")
    bad = [i for i in sc.fail if not 0 <= i < grid.n_lines]
    if bad:
        raise ScenarioError(f"failure names unknown line(s) {bad}")
    return tuple(sorted(set(sc.fail)))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _emit(outdir: Path | None, files: dict[str, str], stdout_key: str) -> None:
    """Write ``files`` into ``outdir``; without one, print the main file."""
    if outdir is None:
        sys.stdout.write(files[stdout_key])
        return
    outdir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (outdir / name).write_text(text, encoding="utf-8")
        log.info("wrote %s", outdir / name)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.kind == "mring":
        grid = fixtures.make_mring(args.M, capacity=args.capacity)
    else:
        grid = fixtures.make_qgraph(args.m, capacity=args.capacity)
    text = serialize_grid(grid)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_provision(args) -> int:
    sc = Scenario(grid=Path(args.grid), provision=_provision_kind(args.provision or "n-1", "--provision"),
                  fos=args.fos if args.fos is not None else 1.2)
    grid = prepare_grid(sc, args.jobs)
    text = serialize_grid(grid)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    sc = apply_flags(load_source(args.source), args)
    if sc.sweep:
        return _do_sweep(sc, args.jobs, getattr(args, "workdir", None))
    grid = prepare_grid(sc, args.jobs)
    failure = resolve_failure(sc, grid)
    rep = cascade.run(grid, failure, sc.config)
    _emit(sc.output, {"report.csv": rep.to_csv(), "report.json": rep.to_json()}, "report.json")
    if rep.max_rounds_exceeded:
        log.warning("cascade hit the round cap of %d", sc.config.max_rounds)
        return EXIT_CAP
    return EXIT_OK


def _do_sweep(sc: Scenario, jobs: int, workdir) -> int:
    if sc.radius is None:
        raise ScenarioError("a sweep needs --radius")
    grid = prepare_grid(sc, jobs)

    def progress(done, total):
        if done == total or done % max(1, total // 20) == 0:
            log.info("sweep progress: %d/%d", done, total)

    results = geo.sweep(grid, sc.radius, sc.config, section_km=sc.section_km, jobs=jobs,
                        workdir=workdir, progress=progress)
    _emit(sc.output, {"sweep.csv": geo.sweep_csv(results), "sweep.geojson": geo.sweep_geojson(results)}, "sweep.csv")
    if any(r.error for r in results):
        log.warning("%d candidate(s) failed", sum(1 for r in results if r.error))
    return EXIT_CAP if any(r.stable is False for r in results) else EXIT_OK


def cmd_sweep(args) -> int:
    sc = apply_flags(load_source(args.source), args)
    sc.sweep, sc.fail, sc.event = True, None, None
    return _do_sweep(sc, args.jobs, args.workdir)


def cmd_mc(args) -> int:
    sc = apply_flags(load_source(args.source), args)
    runs = args.runs if args.runs is not None else int(sc.extra.get("runs", 100))
    grid = prepare_grid(sc, args.jobs)
    failure = resolve_failure(sc, grid)
    res = cascade.monte_carlo(grid, failure, sc.config, runs, jobs=args.jobs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "seed", "yield", "rounds", "stable"])
    for k, (s, rep) in enumerate(zip(res.seeds, res.reports)):
        w.writerow([k, s, repr(rep.yield_), rep.rounds_to_stability, int(rep.stable)])
    summary = {
        "runs": runs,
        "seed": sc.config.seed,
        "mean_yield": res.mean_yield,
        "std_yield": res.std_yield,
        "initial_failure": list(failure),
    }
    _emit(sc.output, {"mc.csv": buf.getvalue(), "mc.json": _dump(summary)}, "mc.json")
    return EXIT_CAP if any(not r.stable for r in res.reports) else EXIT_OK


def alpha_sweep(grid: Grid, failure, config: CascadeConfig, alphas) -> tuple[str, dict]:
    """Max moving-average overload by round, one column per alpha."""
    reports = {a: cascade.run(grid, failure, replace(config, alpha=a)) for a in alphas}
    depth = max(len(r.records) for r in reports.values())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round"] + [f"alpha={a!r}" for a in alphas])
    for t in range(depth):
        row = [t]
        for a in alphas:
            recs = reports[a].records
            row.append(repr(recs[t].max_mavg_overload) if t < len(recs) else "")
        w.writerow(row)
    summary = {
        repr(a): {"rounds_to_stability": r.rounds_to_stability, "yield": r.yield_, "stable": r.stable}
        for a, r in reports.items()
    }
    return buf.getvalue(), summary


def cmd_alpha_sweep(args) -> int:
    sc = apply_flags(load_source(args.source), args)
    text = args.alphas or sc.extra.get("alphas", "0.1,0.3,0.5,1.0")
    alphas = _floats(text, "--alphas")
    for a in alphas:
        if not 0 < a <= 1:
            raise ScenarioError(f"alpha {a} is outside (0, 1]")
    grid = prepare_grid(sc, args.jobs)
    failure = resolve_failure(sc, grid)
    table, summary = alpha_sweep(grid, failure, sc.config, alphas)
    _emit(sc.output, {"alpha_sweep.csv": table, "alpha_sweep.json": _dump(summary)}, "alpha_sweep.csv")
    return EXIT_CAP if any(not v["stable"] for v in summary.values()) else EXIT_OK


def cmd_control_sweep(args) -> int:
    sc = apply_flags(load_source(args.source), args)
    rounds = _ints(args.rounds or sc.extra.get("rounds", "1"), "--rounds")
    grid = prepare_grid(sc, args.jobs)
    failure = resolve_failure(sc, grid)
    outcomes = control.control_sweep(grid, failure, sc.config, rounds, epsilon=args.control_epsilon,
                                     backend=args.lp_backend, jobs=args.jobs)
    for o in outcomes:
        if o.status != "stable":
            log.warning("control at round %d: %s %s", o.round, o.status, o.message)
    _emit(sc.output, {"control.csv": control.outcomes_csv(outcomes)}, "control.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _cascade_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("cascade")
    g.add_argument("--alpha", type=float, help="moving-average weight in (0, 1]")
    g.add_argument("--epsilon", type=float, help="half-width of the probabilistic band")
    g.add_argument("--p", type=float, help="outage probability inside the band")
    g.add_argument("--seed", type=int, help="master RNG seed")
    g.add_argument("--max-rounds", type=int, dest="max_rounds")
    g.add_argument("--provision", choices=["n", "n-1", "none"], help="recompute capacities before running")
    g.add_argument("--fos", type=float, help="factor of safety for --provision (default 1.2)")


def _failure_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("failure")
    g.add_argument("--fail", help="comma-separated line ids")
    g.add_argument("--event", help="x,y of a disk event (needs --radius)")
    g.add_argument("--radius", type=float, help="event radius in km")


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("-o", "--output", help=out_help)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridcascade", description="DC power-flow cascade simulator")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="write an analytic test grid")
    p.add_argument("kind", choices=["mring", "qgraph"])
    p.add_argument("--M", type=int, default=4, help="areas of the M-ring")
    p.add_argument("--m", type=int, default=4, help="paths of the Q-graph")
    p.add_argument("--capacity", type=float, help="uniform line capacity")
    p.add_argument("-o", "--output", help="grid file (default: stdout)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("provision", help="set capacities by N or N-1 analysis")
    p.add_argument("grid")
    p.add_argument("--provision", choices=["n", "n-1"], default="n-1")
    p.add_argument("--fos", type=float, default=1.2)
    _common(p, "grid file (default: stdout)")
    p.set_defaults(func=cmd_provision)

    p = sub.add_parser("run", help="simulate one cascade")
    p.add_argument("source", help="scenario or grid file")
    _cascade_flags(p)
    _failure_flags(p)
    p.add_argument("--workdir", help="per-candidate result cache when the scenario is a sweep")
    _common(p, "output directory for report.csv and report.json (default: JSON on stdout)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="cascade from every distinct disk event of a radius")
    p.add_argument("source")
    _cascade_flags(p)
    p.add_argument("--radius", type=float)
    p.add_argument("--section-km", type=float, dest="section_km", help="split candidate search into square cells")
    p.add_argument("--workdir", help="directory of per-candidate results; reruns resume from it")
    _common(p, "output directory for sweep.csv and sweep.geojson (default: CSV on stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mc", help="Monte Carlo over seeds derived from --seed")
    p.add_argument("source")
    p.add_argument("--runs", type=int)
    _cascade_flags(p)
    _failure_flags(p)
    _common(p, "output directory for mc.csv and mc.json (default: JSON on stdout)")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("alpha-sweep", help="max overload by round for several alphas")
    p.add_argument("source")
    p.add_argument("--alphas", help="comma-separated values (default 0.1,0.3,0.5,1.0)")
    _cascade_flags(p)
    _failure_flags(p)
    _common(p, "output directory for alpha_sweep.csv and alpha_sweep.json (default: CSV on stdout)")
    p.set_defaults(func=cmd_alpha_sweep)

    p = sub.add_parser("control-sweep", help="optimal shedding applied at each given round")
    p.add_argument("source")
    p.add_argument("--rounds", help="comma-separated rounds, e.g. 1,5,10")
    p.add_argument("--control-epsilon", type=float, dest="control_epsilon",
                   help="safety margin in the control LP (default: the cascade epsilon)")
    p.add_argument("--lp-backend", choices=["auto", "simplex", "highs"], default="auto", dest="lp_backend")
    _cascade_flags(p)
    _failure_flags(p)
    _common(p, "output directory for control.csv (default: stdout)")
    p.set_defaults(func=cmd_control_sweep)
    return ap


def _setup_logging() -> None:
    level = os.environ.get("GRIDCASCADE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("gridcascade: --jobs must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except (GridError, ScenarioError, cascade.CascadeError, control.ControlError, ValueError) as e:
        print(f"gridcascade: error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:  # keep the exit-code contract on unexpected failures
        log.debug("unexpected failure", exc_info=True)
        print(f"gridcascade: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
