"""Monte Carlo validation of stratified designs, sample selection and a small
synthetic frame generator."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from .frame import SamplingFrame
from .stats import StratumSummary, neighbor_weights

SYNTH_CAP = 2000


class EvaluationError(ValueError):
    pass


@dataclass
class EvaluationReport:
    coeff_var: dict[int, np.ndarray]
    relative_bias: dict[int, np.ndarray]
    nsampl: int
    variables: list[str]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for d in sorted(self.coeff_var):
            for k, name in enumerate(self.variables):
                rows.append({"dom": d, "variable": name, "cv": self.coeff_var[d][k], "bias": self.relative_bias[d][k]})
        return pd.DataFrame(rows, columns=["dom", "variable", "cv", "bias"])


def _allocation_map(allocation) -> dict[tuple[int, int], int]:
    if hasattr(allocation, "allocation_by_stratum"):
        return allocation.allocation_by_stratum()
    if isinstance(allocation, Mapping):
        return {(int(d), int(h)): int(n) for (d, h), n in allocation.items()}
    return {(int(s.dom), int(s.label)): int(s.n) for s in allocation}


def _strata_index(frame: SamplingFrame, assignment: np.ndarray, allocation):
    """Per stratum: key, unit indices and n_h."""
    alloc = _allocation_map(allocation)
    assignment = np.asarray(assignment)
    keys = np.column_stack([frame.domain, assignment])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    order = np.argsort(inv, kind="stable")
    bounds = np.searchsorted(inv[order], np.arange(len(uniq) + 1))
    out = []
    for g, (d, h) in enumerate(uniq):
        key = (int(d), int(h))
        if key not in alloc:
            raise EvaluationError(f"no allocation for stratum {key}")
        idx = order[bounds[g] : bounds[g + 1]]
        n = alloc[key]
        if n > len(idx):
            raise EvaluationError(f"stratum {key}: n_h={n} exceeds N_h={len(idx)}")
        if n < 1:
            raise EvaluationError(f"stratum {key}: n_h must be at least 1")
        out.append((key, idx, n))
    missing = set(alloc) - {k for k, _, _ in out}
    if missing:
        raise EvaluationError(f"allocation names strata absent from the frame: {sorted(missing)}")
    return out


def select_sample(frame: SamplingFrame, assignment, allocation, rng: np.random.Generator | int | None = None) -> pd.DataFrame:
    """Stratified SRSWOR; returns ``id, dom, stratum, weight`` with weight ``N_h / n_h``."""
    rng = np.random.default_rng(rng)
    rows = []
    for (d, h), idx, n in _strata_index(frame, assignment, allocation):
        pick = np.sort(rng.choice(idx, size=n, replace=False))
        rows.append(pd.DataFrame({"id": frame.ids[pick], "dom": d, "stratum": h, "weight": len(idx) / n}))
    return pd.concat(rows, ignore_index=True)


def _replicate_means(values, strata, doms, seed, reps):
    """HT domain means for the given replicate numbers, shape ``(len(reps), D, q)``."""
    q = values.shape[1]
    out = np.zeros((len(reps), len(doms), q))
    dpos = {d: i for i, d in enumerate(doms)}
    Nd = np.zeros(len(doms))
    for (d, _), idx, _ in strata:
        Nd[dpos[d]] += len(idx)
    for r_i, r in enumerate(reps):
        rng = np.random.default_rng([seed, r])
        for (d, _), idx, n in strata:
            pick = rng.choice(len(idx), size=n, replace=False)
            out[r_i, dpos[d]] += len(idx) * values[idx[pick]].mean(axis=0)
    return out / Nd[None, :, None]


def _replicate_job(args):
    return _replicate_means(*args)


def eval_solution(
    frame: SamplingFrame,
    assignment,
    allocation,
    nsampl: int = 1000,
    seed: int = 1234,
    targets: Sequence[str] = (),
    workers: int = 1,
) -> EvaluationReport:
    """Empirical CV and relative bias of HT domain means over ``nsampl`` samples.

    Evaluated variables are the frame's Y columns followed by the extra
    columns named in ``targets`` (e.g. the true target behind a proxy).
    Replicate ``r`` draws from its own generator seeded by ``(seed, r)``, so
    results do not depend on ``workers``.
    """
    if nsampl < 2:
        raise EvaluationError("nsampl must be at least 2")
    if nsampl < 100:
        warnings.warn(f"nsampl={nsampl} gives unstable CV estimates", stacklevel=2)
    values = frame.y.astype(float)
    names = list(frame.y_names)
    for t in targets:
        if t not in frame.extra:
            raise EvaluationError(f"target column {t!r} not carried by the frame")
        values = np.column_stack([values, frame.extra[t]])
        names.append(t)
    strata = _strata_index(frame, assignment, allocation)
    doms = sorted({k[0] for k, _, _ in strata})
    reps = np.arange(nsampl)
    if workers > 1:
        chunks = np.array_split(reps, workers)
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_replicate_job, [(values, strata, doms, seed, c) for c in chunks]))
        est = np.concatenate(parts)
    else:
        est = _replicate_means(values, strata, doms, seed, reps)
    cv, bias = {}, {}
    for i, d in enumerate(doms):
        e = est[:, i, :]
        truth = values[frame.domain == d].mean(axis=0)
        m = e.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            cv[d] = np.where(m != 0, e.std(axis=0, ddof=1) / np.abs(m), 0.0)
            bias[d] = np.where(truth != 0, (m - truth) / truth, 0.0)
        cv[d] = np.maximum(cv[d], 0.0)
    return EvaluationReport(cv, bias, nsampl, names)


def scale_allocation(strata: Sequence[StratumSummary], target_total: int, minnumstrat: int = 2) -> list[StratumSummary]:
    """Rescale allocations proportionally to ``target_total``.

    Each ``n_h`` becomes ``ceil(clip(f * n_h, min(minnumstrat, N_h), N_h))``
    with the common factor ``f`` chosen so the unrounded total hits the
    target; strata capped at ``N_h`` push the deficit onto the others.
    """
    N = np.array([s.N for s in strata], dtype=float)
    n = np.array([s.n for s in strata], dtype=float)
    lo = np.minimum(minnumstrat, N)
    if target_total < lo.sum():
        raise EvaluationError(f"target_total {target_total} below the minimum {int(lo.sum())}")
    if target_total > N.sum():
        raise EvaluationError(f"target_total {target_total} exceeds the frame size {int(N.sum())}")
    if np.any(n <= 0):
        raise EvaluationError("every stratum needs a positive allocation to scale")

    def total(f):
        return np.clip(f * n, lo, N).sum() - target_total

    if total(0.0) >= 0:
        f = 0.0
    else:
        hi = 1.0
        while total(hi) < 0:
            hi *= 2
        f = brentq(total, 0.0, hi, xtol=1e-12)
    new = np.ceil(np.clip(f * n, lo, N) - 1e-9).astype(int)
    return [replace(s, n=int(k)) for s, k in zip(strata, new)]


def synth_frame(
    n_units: int,
    beta: float = 1.0,
    gamma: float = 0.0,
    error_sd: float = 1.0,
    range: float = 0.0,
    rng: np.random.Generator | int | None = None,
    beta2: float = 0.0,
    extent: float = 10000.0,
    k_neighbors: int = 4,
    y_shape: float = 2.0,
    y_scale: float = 50.0,
) -> SamplingFrame:
    """Frame with proxy ``Y`` and target ``Z = beta Y + beta2 WY + u Y**gamma``.

    ``Y`` is gamma distributed, coordinates are uniform on a square of side
    ``extent``, ``WY`` is the row-standardized k-nearest-neighbour lag of
    ``Y`` and ``u`` a zero-mean Gaussian field with sd ``error_sd`` and
    exponential covariance of the given ``range`` (``range=0`` gives
    independent errors).  ``X = Y = Y``; ``Z`` and ``WY`` are carried as extra
    columns ``Z`` and ``WY``.
    """
    if n_units > SYNTH_CAP:
        raise EvaluationError(f"n_units={n_units} exceeds the generator cap of {SYNTH_CAP}")
    if n_units < 2:
        raise EvaluationError("n_units must be at least 2")
    rng = np.random.default_rng(rng)
    coords = rng.uniform(0.0, extent, (n_units, 2))
    y = rng.gamma(y_shape, y_scale, n_units)
    lag = neighbor_weights(coords, k=k_neighbors) @ y
    if error_sd == 0:
        u = np.zeros(n_units)
    elif range <= 0:
        u = rng.normal(0.0, error_sd, n_units)
    else:
        d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
        C = error_sd**2 * np.exp(-d / range)
        L = np.linalg.cholesky(C + 1e-10 * error_sd**2 * np.eye(n_units))
        u = L @ rng.standard_normal(n_units)
    z = beta * y + beta2 * lag + u * y**gamma
    return SamplingFrame(
        ids=np.arange(1, n_units + 1),
        x=y[:, None].copy(),
        y=y[:, None].copy(),
        domain=np.ones(n_units, dtype=int),
        x_names=["X1"],
        y_names=["Y1"],
        lon=coords[:, 0],
        lat=coords[:, 1],
        extra={"Z": z, "WY": lag},
    )


def expected_cv_se(cv: float, nsampl: int) -> float:
    """Approximate Monte Carlo standard error of an empirical CV (normal estimates)."""
    return cv * math.sqrt((1 + 2 * cv * cv) / (2 * (nsampl - 1)))
