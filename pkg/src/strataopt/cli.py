"""Command-line driver: validate, kmeans, optimize, evaluate, select.

Settings come from a TOML file (``--config``) and may be overridden by
flags.  Exit codes: 0 success, 1 validation or domain failure, 2 I/O or
schema failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bethel import AllocationError
from .evaluation import EvaluationError, eval_solution, select_sample
from .frame import (
    ColumnMapping,
    FrameValidationError,
    ParseError,
    PrecisionConstraints,
    SchemaError,
    SamplingFrame,
    load_constraints,
    load_frame,
    validate,
)
from .optimizer import GAParams, MethodError, OptimizationError, Solution, SpatialParams, kmeans_solution, optimize
from .stats import InvalidModelInput, ModelSpec

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("strataopt")

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    method: str = "continuous"
    frame: Path | None = None
    constraints: Path | None = None
    out: Path = Path("out")
    solution: Path | None = None
    columns: ColumnMapping | None = None
    ga: GAParams = field(default_factory=GAParams)
    spatial: SpatialParams | None = None
    models: list[ModelSpec] | None = None
    nsampl: int = 1000
    targets: list[str] = field(default_factory=list)
    maxclusters: int = 10

    @property
    def solution_dir(self) -> Path:
        return self.solution or self.out


# -- configuration ------------------------------------------------------------------


def _guess_columns(header: list[str]) -> ColumnMapping:
    """Mapping for frames using the conventional column names."""

    def numbered(prefix):
        cols = [h for h in header if re.fullmatch(rf"{prefix}\d+", h, flags=re.IGNORECASE)]
        return sorted(cols, key=lambda c: int(re.sub(r"\D", "", c)))

    def find(*names):
        low = {h.lower(): h for h in header}
        for n in names:
            if n in low:
                return low[n]
        return None

    ident = find("id")
    dom = find("domainvalue")
    if ident is None or dom is None:
        raise SchemaError("cannot infer columns: need 'id' and 'domainvalue' or a [columns] section")
    return ColumnMapping(
        id=ident,
        x=numbered("X"),
        y=numbered("Y"),
        domainvalue=dom,
        var=numbered("VAR") or None,
        lon=find("lon"),
        lat=find("lat"),
        weight=find("weight", "cost"),
    )


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def build_config(args: argparse.Namespace) -> RunConfig:
    raw = load_config(args.config)
    base = Path(args.config).parent if args.config else Path(".")

    def path_of(key):
        v = getattr(args, key, None)
        if v is not None:
            return Path(v)
        if key in raw:
            return base / raw[key]
        return None

    cfg = RunConfig()
    cfg.method = args.method or raw.get("method", cfg.method)
    cfg.frame = path_of("frame")
    cfg.constraints = path_of("constraints")
    cfg.out = path_of("out") or cfg.out
    cfg.solution = path_of("solution")
    if "columns" in raw:
        cfg.columns = ColumnMapping.from_dict(raw["columns"])

    ga = dict(raw.get("ga", {}))
    if "seed" in raw:
        ga.setdefault("seed", raw["seed"])
    for flag, key in (("nstrata", "nStrata"), ("iter", "iterations"), ("pops", "pops"), ("seed", "seed"), ("workers", "workers")):
        v = getattr(args, flag, None)
        if v is not None:
            ga[key] = v
    try:
        cfg.ga = GAParams(**ga)
        if "spatial" in raw:
            cfg.spatial = SpatialParams(**raw["spatial"])
        if "model" in raw:
            cfg.models = [ModelSpec.from_dict(m) for m in raw["model"]]
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    ev = raw.get("evaluate", {})
    cfg.nsampl = int(getattr(args, "nsampl", None) or ev.get("nsampl", cfg.nsampl))
    cfg.targets = list(ev.get("targets", []))
    cfg.maxclusters = int(getattr(args, "maxclusters", None) or raw.get("kmeans", {}).get("maxclusters", 10))
    if cfg.method == "spatial" and cfg.spatial is None:
        raise ConfigError("method 'spatial' needs a [spatial] section with fitting and range")
    return cfg


def read_inputs(cfg: RunConfig) -> tuple[SamplingFrame, PrecisionConstraints]:
    if cfg.frame is None or cfg.constraints is None:
        raise ConfigError("both a frame and a constraints file are required")
    mapping = cfg.columns
    if mapping is None:
        with open(cfg.frame, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh), [])]
        mapping = _guess_columns(header)
    targets = [t for t in cfg.targets if t not in mapping.extra]
    if targets:
        mapping = ColumnMapping(**{**mapping.__dict__, "extra": [*mapping.extra, *targets]})
    return load_frame(cfg.frame, mapping), load_constraints(cfg.constraints)


# -- outputs ------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def write_solution(sol: Solution, frame: SamplingFrame, cfg: RunConfig) -> None:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "method": sol.method,
        "total_size": sol.total_size,
        "converged": sol.converged,
        "expected_cv": sol.expected_cv,
        "genome": sol.genome,
        "cuts": sol.cuts,
        "trace": sol.trace,
        "diagnostics": sol.diagnostics,
        "params": cfg.ga.__dict__,
        "variables": {"x": frame.x_names, "y": frame.y_names},
        "strata": [
            {"dom": s.dom, "stratum": s.label, "N": s.N, "n": s.n, "mean": s.mean, "sd": s.sd, "cost": s.cost}
            for s in sol.strata
        ],
    }
    (out / "solution.json").write_text(json.dumps(_to_jsonable(doc), indent=2) + "\n", encoding="utf-8")

    q = len(frame.y_names)
    header = ["dom", "stratum", "N", "n", "rate", "cost"]
    header += [f"mean_{y}" for y in frame.y_names] + [f"sd_{y}" for y in frame.y_names]
    if sol.method == "atomic":
        header.append("atoms")
    else:
        for x in frame.x_names:
            header += [f"lower_{x}", f"upper_{x}"]
    rows = []
    for s in sol.strata:
        sel = (frame.domain == s.dom) & (sol.assignment == s.label)
        row = [s.dom, s.label, s.N, s.n, s.n / s.N, s.cost, *s.mean[:q], *s.sd[:q]]
        if sol.method == "atomic":
            combos = sorted({"|".join(map(str, r)) for r in frame.x[sel]})
            row.append(";".join(combos))
        else:
            xs = frame.x[sel].astype(float)
            for j in range(xs.shape[1]):
                row += [xs[:, j].min(), xs[:, j].max()]
        rows.append(row)
    _write_csv(out / "strata.csv", header, rows)
    _write_csv(
        out / "assignment.csv",
        ["id", "dom", "stratum"],
        zip(frame.ids, frame.domain, sol.assignment),
    )
    doms = sorted(sol.trace)
    tot = sol.total_trace
    trows = []
    for g in range(len(tot)):
        trows.append([g + 1, tot[g], *(sol.trace[d][min(g, len(sol.trace[d]) - 1)] for d in doms)])
    _write_csv(out / "trace.csv", ["generation", "total", *(f"dom_{d}" for d in doms)], trows)


def read_solution(cfg: RunConfig, frame: SamplingFrame) -> tuple[np.ndarray, dict]:
    """Assignment aligned to ``frame`` and the ``(dom, stratum) -> n`` allocation."""
    d = cfg.solution_dir
    alloc = {}
    with open(d / "strata.csv", newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            alloc[(int(r["dom"]), int(r["stratum"]))] = int(r["n"])
    lab = {}
    with open(d / "assignment.csv", newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            lab[r["id"]] = int(r["stratum"])
    missing = [i for i in frame.ids if i not in lab]
    if missing:
        raise FrameValidationError(f"assignment has no stratum for unit(s) {', '.join(missing[:5])}")
    return np.array([lab[i] for i in frame.ids]), alloc


# -- commands -----------------------------------------------------------------------


def cmd_validate(cfg: RunConfig) -> int:
    frame, cons = read_inputs(cfg)
    rep = validate(frame, cons, cfg.method)
    print(rep)
    return EXIT_OK if rep.ok else EXIT_FAIL


def _checked_inputs(cfg):
    frame, cons = read_inputs(cfg)
    rep = validate(frame, cons, cfg.method)
    for w in rep.warnings:
        log.warning(w)
    if not rep.ok:
        for e in rep.errors:
            print(f"ERROR: {e}", file=sys.stderr)
        return None, None
    return frame, cons


def cmd_optimize(cfg: RunConfig) -> int:
    frame, cons = _checked_inputs(cfg)
    if frame is None:
        return EXIT_FAIL
    sol = optimize(cfg.method, frame, cons, cfg.ga, models=cfg.models, spatial=cfg.spatial)
    write_solution(sol, frame, cfg)
    cvs = ", ".join(f"dom {d}: {np.round(v, 4).tolist()}" for d, v in sorted(sol.expected_cv.items()))
    print(f"total sample size {sol.total_size} over {len(sol.strata)} strata; expected CV {cvs}")
    return EXIT_OK


def cmd_kmeans(cfg: RunConfig) -> int:
    frame, cons = _checked_inputs(cfg)
    if frame is None:
        return EXIT_FAIL
    curve = kmeans_solution(
        frame, cons, method=cfg.method, models=cfg.models, spatial=cfg.spatial, maxclusters=cfg.maxclusters, params=cfg.ga
    )
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.out / "curve.csv", ["k", "size"], curve)
    for k, n in curve:
        print(f"k={k}\tsize={n}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    frame, _ = read_inputs(cfg)
    labels, alloc = read_solution(cfg, frame)
    rep = eval_solution(frame, labels, alloc, cfg.nsampl, seed=cfg.ga.seed, targets=cfg.targets, workers=cfg.ga.workers)
    cfg.out.mkdir(parents=True, exist_ok=True)
    df = rep.to_frame()
    _write_csv(cfg.out / "report.csv", list(df.columns), df.itertuples(index=False))
    print(df.to_string(index=False))
    return EXIT_OK


def cmd_select(cfg: RunConfig) -> int:
    frame, _ = read_inputs(cfg)
    labels, alloc = read_solution(cfg, frame)
    sample = select_sample(frame, labels, alloc, np.random.default_rng(cfg.ga.seed))
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.out / "sample.csv", ["id", "dom", "stratum", "weight"], sample.itertuples(index=False))
    print(f"selected {len(sample)} units")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "kmeans": cmd_kmeans,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "select": cmd_select,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strataopt", description="Optimal stratification of sampling frames.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--frame", type=Path, help="frame CSV")
    common.add_argument("--constraints", type=Path, help="precision constraints CSV")
    common.add_argument("--method", choices=["atomic", "continuous", "spatial"])
    common.add_argument("--nstrata", type=int)
    common.add_argument("--iter", type=int)
    common.add_argument("--pops", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check frame and constraints")
    k = sub.add_parser("kmeans", parents=[common], help="k-means sample size curve")
    k.add_argument("--maxclusters", type=int)
    sub.add_parser("optimize", parents=[common], help="run the genetic search")
    e = sub.add_parser("evaluate", parents=[common], help="Monte Carlo CVs of a solution")
    e.add_argument("--solution", type=Path, help="directory holding strata.csv and assignment.csv")
    e.add_argument("--nsampl", type=int)
    s = sub.add_parser("select", parents=[common], help="draw one stratified sample")
    s.add_argument("--solution", type=Path)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except (OSError, SchemaError, ParseError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (
        ConfigError,
        FrameValidationError,
        MethodError,
        OptimizationError,
        AllocationError,
        EvaluationError,
        InvalidModelInput,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
