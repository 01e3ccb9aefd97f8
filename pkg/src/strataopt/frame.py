"""Sampling frames, precision constraints and their validation.

Frames are read from comma-separated files with a header row.  Column names
are supplied through a :class:`ColumnMapping`; everything downstream works on
the column-oriented :class:`SamplingFrame`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

METHODS = ("atomic", "continuous", "spatial")


class FrameError(ValueError):
    """Base class for frame and constraint problems."""


class SchemaError(FrameError):
    pass


class ParseError(FrameError):
    pass


class FrameValidationError(FrameError):
    pass


@dataclass(frozen=True)
class ColumnMapping:
    """Names of the frame CSV columns.

    ``extra`` lists additional numeric columns to carry along, e.g. the
    spatially lagged regressor of a parametric spatial model or the true
    target values used when evaluating a solution.
    """

    id: str
    x: Sequence[str]
    y: Sequence[str]
    domainvalue: str
    var: Sequence[str] | None = None
    lon: str | None = None
    lat: str | None = None
    weight: str | None = None
    extra: Sequence[str] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnMapping":
        def seq(v):
            if v is None:
                return None
            return [v] if isinstance(v, str) else list(v)

        return cls(
            id=d["id"],
            x=seq(d["x"]),
            y=seq(d["y"]),
            domainvalue=d["domainvalue"],
            var=seq(d.get("var")),
            lon=d.get("lon"),
            lat=d.get("lat"),
            weight=d.get("weight"),
            extra=seq(d.get("extra")) or (),
        )


@dataclass(frozen=True)
class UnitRecord:
    id: str
    x: tuple
    y: tuple
    var: tuple | None
    lon: float | None
    lat: float | None
    domainvalue: int
    weight: float


@dataclass
class SamplingFrame:
    """Column-oriented frame of ``n`` units.

    ``x`` is an ``(n, p)`` array, float when every stratification variable is
    numeric and object otherwise; ``y`` and ``var`` are ``(n, q)`` floats.
    """

    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    x_names: list[str]
    y_names: list[str]
    var: np.ndarray | None = None
    lon: np.ndarray | None = None
    lat: np.ndarray | None = None
    weight: np.ndarray | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    x_numeric: tuple[bool, ...] = ()

    def __post_init__(self):
        n = len(self.ids)
        self.ids = np.asarray(self.ids).astype(str)
        self.x = np.asarray(self.x)
        p, q = len(self.x_names), len(self.y_names)
        if self.x.ndim == 1 or self.x.size == 0:
            self.x = self.x.reshape(n, p)
        self.y = np.asarray(self.y, dtype=float).reshape(n, q)
        self.domain = np.asarray(self.domain, dtype=int)
        if self.var is not None:
            self.var = np.asarray(self.var, dtype=float).reshape(n, q)
        if self.lon is not None:
            self.lon = np.asarray(self.lon, dtype=float)
            self.lat = np.asarray(self.lat, dtype=float)
        if self.weight is None:
            self.weight = np.ones(n)
        else:
            self.weight = np.asarray(self.weight, dtype=float)
        self.extra = {k: np.asarray(v, dtype=float) for k, v in self.extra.items()}
        if not self.x_numeric:
            self.x_numeric = tuple(_is_numeric_column(self.x[:, j]) for j in range(self.x.shape[1]))
        if all(self.x_numeric) and self.x.dtype == object:
            self.x = self.x.astype(float)
        self._check()

    def _check(self):
        n = len(self.ids)
        p, q = len(self.x_names), len(self.y_names)
        if self.x.shape != (n, p):
            raise FrameValidationError(f"x has shape {self.x.shape}, expected {(n, p)}")
        if self.y.shape != (n, q):
            raise FrameValidationError(f"y has shape {self.y.shape}, expected {(n, q)}")
        if self.domain.shape != (n,) or (n and self.domain.min() < 1):
            raise FrameValidationError("domainvalue must be a positive integer for every unit")
        if self.var is not None:
            if self.var.shape != (n, q):
                raise FrameValidationError(f"var has shape {self.var.shape}, expected {(n, q)}")
            if np.any(self.var < 0) or not np.all(np.isfinite(self.var)):
                raise FrameValidationError("prediction variances must be finite and nonnegative")
        if self.lon is not None and not (np.all(np.isfinite(self.lon)) and np.all(np.isfinite(self.lat))):
            raise FrameValidationError("coordinates must be finite")
        if np.any(self.weight <= 0):
            raise FrameValidationError("unit weights must be positive")
        _, first, counts = np.unique(self.ids, return_index=True, return_counts=True)
        if np.any(counts > 1):
            dup = self.ids[np.sort(first[counts > 1])]
            raise FrameValidationError(f"duplicate unit id(s): {', '.join(dup[:5])}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def has_variances(self) -> bool:
        return self.var is not None

    @property
    def has_coordinates(self) -> bool:
        return self.lon is not None

    @property
    def coords(self) -> np.ndarray | None:
        if self.lon is None:
            return None
        return np.column_stack([self.lon, self.lat])

    @property
    def domains(self) -> np.ndarray:
        return np.unique(self.domain)

    def unit(self, i: int) -> UnitRecord:
        return UnitRecord(
            id=str(self.ids[i]),
            x=tuple(self.x[i]),
            y=tuple(self.y[i]),
            var=None if self.var is None else tuple(self.var[i]),
            lon=None if self.lon is None else float(self.lon[i]),
            lat=None if self.lat is None else float(self.lat[i]),
            domainvalue=int(self.domain[i]),
            weight=float(self.weight[i]),
        )

    def units(self) -> Iterator[UnitRecord]:
        for i in range(len(self)):
            yield self.unit(i)

    def subset(self, idx) -> "SamplingFrame":
        idx = np.asarray(idx)
        return SamplingFrame(
            ids=self.ids[idx],
            x=self.x[idx],
            y=self.y[idx],
            domain=self.domain[idx],
            x_names=list(self.x_names),
            y_names=list(self.y_names),
            var=None if self.var is None else self.var[idx],
            lon=None if self.lon is None else self.lon[idx],
            lat=None if self.lat is None else self.lat[idx],
            weight=self.weight[idx],
            extra={k: v[idx] for k, v in self.extra.items()},
            x_numeric=self.x_numeric,
        )

    def x_codes(self) -> np.ndarray:
        """Dense integer codes for every stratification column, ``(n, p)``."""
        codes = np.empty(self.x.shape, dtype=np.int64)
        for j in range(self.x.shape[1]):
            col = self.x[:, j]
            if not self.x_numeric[j]:
                col = col.astype(str)
            _, codes[:, j] = np.unique(col, return_inverse=True)
        return codes


def _is_numeric_column(col: np.ndarray) -> bool:
    if col.dtype.kind in "fiub":
        return True
    try:
        np.asarray(col, dtype=float)
    except (TypeError, ValueError):
        return False
    return True


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        rows = [r for r in reader if r]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise ParseError(f"{path}: row {i + 1} has {len(r)} fields, header has {len(header)}")
    return header, rows


def _numeric(values: list[str], name: str, path: Path) -> np.ndarray:
    out = np.empty(len(values))
    for i, v in enumerate(values):
        try:
            out[i] = float(v)
        except ValueError:
            raise ParseError(f"{path}: non-numeric value {v!r} in column {name!r} at row {i + 1}") from None
    return out


def load_frame(path: str | Path, mapping: ColumnMapping) -> SamplingFrame:
    """Read a frame CSV; row order is preserved."""
    path = Path(path)
    header, rows = _read_rows(path)
    pos = {name: j for j, name in enumerate(header)}
    wanted = [mapping.id, *mapping.x, *mapping.y, mapping.domainvalue, *(mapping.var or ()), *mapping.extra]
    wanted += [c for c in (mapping.lon, mapping.lat, mapping.weight) if c]
    for name in wanted:
        if name not in pos:
            raise SchemaError(f"{path}: missing column {name!r}")
    if (mapping.lon is None) != (mapping.lat is None):
        raise SchemaError("lon and lat must be given together")
    if mapping.var is not None and len(mapping.var) != len(mapping.y):
        raise SchemaError("one variance column is required per target variable")

    def col(name):
        return [r[pos[name]].strip() for r in rows]

    def numcol(name):
        return _numeric(col(name), name, path)

    n = len(rows)
    if n == 0:
        log.warning("%s: frame has no units", path)
    xcols, numeric = [], []
    for name in mapping.x:
        raw = col(name)
        try:
            xcols.append(np.array([float(v) for v in raw], dtype=float))
            numeric.append(True)
        except ValueError:
            xcols.append(np.array(raw, dtype=object))
            numeric.append(False)
    x = np.empty((n, len(mapping.x)), dtype=float if all(numeric) else object)
    for j, c in enumerate(xcols):
        x[:, j] = c
    dom = numcol(mapping.domainvalue)
    if n and (np.any(dom != np.round(dom)) or dom.min() < 1):
        raise FrameValidationError(f"{path}: domainvalue must be a positive integer")
    ids = np.array(col(mapping.id), dtype=str)
    _, first, counts = np.unique(ids, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = ids[np.sort(first[counts > 1])]
        raise FrameValidationError(f"{path}: duplicate unit id(s): {', '.join(dup[:5])}")

    def stack(names):
        return np.column_stack([numcol(c) for c in names]) if n else np.empty((0, len(names)))

    return SamplingFrame(
        ids=ids,
        x=x,
        y=stack(mapping.y),
        domain=dom.astype(int),
        x_names=list(mapping.x),
        y_names=list(mapping.y),
        var=stack(mapping.var) if mapping.var else None,
        lon=numcol(mapping.lon) if mapping.lon else None,
        lat=numcol(mapping.lat) if mapping.lat else None,
        weight=numcol(mapping.weight) if mapping.weight else None,
        extra={c: numcol(c) for c in mapping.extra},
        x_numeric=tuple(numeric),
    )


def write_frame(frame: SamplingFrame, path: str | Path) -> ColumnMapping:
    """Write ``frame`` at full precision and return the mapping that reads it back."""
    q = len(frame.y_names)
    # output names are positional so X, Y and VAR may share source names
    xn = [f"X{j + 1}" for j in range(len(frame.x_names))]
    yn = [f"Y{k + 1}" for k in range(q)]
    vn = [f"VAR{k + 1}" for k in range(q)] if frame.has_variances else None
    header = ["ID", *xn, *yn, *(vn or []), "DOMAINVALUE", "WEIGHT"]
    if frame.has_coordinates:
        header += ["LON", "LAT"]
    header += list(frame.extra)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(frame)):
            row = [frame.ids[i]]
            row += [repr(float(v)) if frame.x_numeric[j] else str(v) for j, v in enumerate(frame.x[i])]
            row += [repr(float(v)) for v in frame.y[i]]
            if vn:
                row += [repr(float(v)) for v in frame.var[i]]
            row += [str(int(frame.domain[i])), repr(float(frame.weight[i]))]
            if frame.has_coordinates:
                row += [repr(float(frame.lon[i])), repr(float(frame.lat[i]))]
            row += [repr(float(frame.extra[k][i])) for k in frame.extra]
            w.writerow(row)
    return ColumnMapping(
        id="ID",
        x=xn,
        y=yn,
        var=vn,
        domainvalue="DOMAINVALUE",
        weight="WEIGHT",
        lon="LON" if frame.has_coordinates else None,
        lat="LAT" if frame.has_coordinates else None,
        extra=list(frame.extra),
    )


@dataclass
class PrecisionConstraints:
    """Upper bounds on the CV of each target estimate, one row per domain."""

    cv: dict[int, np.ndarray]
    labels: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.cv = {int(d): np.asarray(v, dtype=float) for d, v in self.cv.items()}
        lengths = {len(v) for v in self.cv.values()}
        if len(lengths) > 1:
            raise FrameValidationError("every constraint row needs the same number of CVs")
        for d, v in self.cv.items():
            if np.any(~(v > 0) | ~(v < 1)):
                raise FrameValidationError(f"domain {d}: CV bounds must lie in (0, 1), got {v.tolist()}")

    @property
    def q(self) -> int:
        return len(next(iter(self.cv.values()))) if self.cv else 0

    @property
    def domains(self) -> list[int]:
        return sorted(self.cv)

    def for_domain(self, d: int) -> np.ndarray:
        try:
            return self.cv[int(d)]
        except KeyError:
            raise FrameValidationError(f"no precision constraint for domain {d}") from None

    @classmethod
    def uniform(cls, cv: Sequence[float], domains: Sequence[int] = (1,)) -> "PrecisionConstraints":
        return cls({d: list(cv) for d in domains})


def load_constraints(path: str | Path) -> PrecisionConstraints:
    """Read ``DOM, CV1..CVq, domainvalue`` rows."""
    path = Path(path)
    header, rows = _read_rows(path)
    cv_cols = sorted(
        (h for h in header if h.upper().startswith("CV") and h[2:].isdigit()), key=lambda h: int(h[2:])
    )
    if "domainvalue" not in header:
        raise SchemaError(f"{path}: missing column 'domainvalue'")
    if not cv_cols:
        raise SchemaError(f"{path}: no CV1..CVq columns")
    pos = {h: j for j, h in enumerate(header)}
    cv, labels = {}, {}
    for i, r in enumerate(rows):
        try:
            d = int(float(r[pos["domainvalue"]]))
            vals = [float(r[pos[c]]) for c in cv_cols]
        except ValueError:
            raise ParseError(f"{path}: non-numeric value at row {i + 1}") from None
        if d in cv:
            raise FrameValidationError(f"{path}: duplicate constraint rows for domain {d}")
        cv[d] = vals
        labels[d] = r[pos["DOM"]] if "DOM" in pos else f"DOM{d}"
    return PrecisionConstraints(cv, labels)


def write_constraints(constraints: PrecisionConstraints, path: str | Path) -> None:
    q = constraints.q
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["DOM", *[f"CV{k + 1}" for k in range(q)], "domainvalue"])
        for d in constraints.domains:
            w.writerow([constraints.labels.get(d, f"DOM{d}"), *map(repr, constraints.cv[d].tolist()), d])


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __str__(self) -> str:
        lines = [f"ERROR: {e}" for e in self.errors] + [f"WARNING: {w}" for w in self.warnings]
        return "\n".join(lines) if lines else "OK"


def validate(frame: SamplingFrame, constraints: PrecisionConstraints, method: str) -> ValidationReport:
    """Check that ``frame`` and ``constraints`` can be fed to ``method``."""
    rep = ValidationReport()
    if method not in METHODS:
        rep.errors.append(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
        return rep
    if len(frame) == 0:
        rep.warnings.append("frame has no units")
    if method == "spatial":
        if not frame.has_coordinates:
            rep.errors.append("coordinates required for method 'spatial'")
        if not frame.has_variances:
            rep.errors.append("prediction variances required for method 'spatial'")
    if method in ("continuous", "spatial"):
        bad = [n for n, ok in zip(frame.x_names, frame.x_numeric) if not ok]
        if bad:
            rep.errors.append(f"method {method!r} needs numeric stratification variables; categorical: {', '.join(bad)}")
    if method == "atomic":
        for j, name in enumerate(frame.x_names):
            if frame.x_numeric[j] and len(frame):
                col = frame.x[:, j].astype(float)
                if np.any(col != np.round(col)):
                    rep.errors.append(
                        f"stratification variable {name!r} is continuous; discretize it or use method 'continuous'"
                    )
    if constraints.q and constraints.q != len(frame.y_names):
        rep.errors.append(f"constraints give {constraints.q} CVs but the frame has {len(frame.y_names)} targets")
    missing = [int(d) for d in frame.domains if int(d) not in constraints.cv]
    if missing:
        rep.errors.append(f"domain(s) without precision constraints: {', '.join(map(str, missing))}")
    if len(frame) and np.any(frame.weight != 1.0) and method == "spatial":
        rep.warnings.append("non-unit costs with method 'spatial'")
    for k, name in enumerate(frame.y_names):
        if len(frame) and not np.all(np.isfinite(frame.y[:, k])):
            rep.errors.append(f"target {name!r} has non-finite values")
    return rep

