"""Minimum-cost multivariate allocation under CV constraints (Bethel–Chromy).

For target ``k`` the CV of the estimated total is

    sqrt(sum_h N_h**2 (1 - n_h/N_h) S_hk**2 / n_h) / |sum_h N_h mean_hk|

and the allocation minimises ``sum_h cost_h n_h`` with every CV below its
bound.  Writing ``a_hk = N_h**2 S_hk**2 / (cv_k T_k)**2`` the constraints are
``sum_h a_hk / n_h <= 1 + sum_h a_hk / N_h``.  Chromy's fixed point iterates
multipliers ``alpha`` over the targets; for fixed ``alpha`` the single
weighted constraint is solved exactly with the bounds
``min(minnumstrat, N_h) <= n_h <= N_h``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .stats import StratumSummary


class AllocationError(ValueError):
    pass


@dataclass
class Allocation:
    n: np.ndarray
    n_real: np.ndarray
    converged: bool
    iterations: int

    @property
    def total(self) -> int:
        return int(self.n.sum())


def _scalar_allocation(A, cost, lo, up):
    """Minimise ``sum cost*n`` s.t. ``sum A/n <= 1``, ``lo <= n <= up``."""
    n = lo.copy()
    if np.sum(A / lo) <= 1.0:
        return n
    base = np.sqrt(A / cost)
    fixed_lo = A == 0
    fixed_up = np.zeros_like(fixed_lo)
    for _ in range(4 * len(A) + 4):
        free = ~(fixed_lo | fixed_up)
        budget = 1.0 - np.sum(A[fixed_lo] / lo[fixed_lo]) - np.sum(A[fixed_up] / up[fixed_up])
        if not free.any():
            break
        theta = np.sum(np.sqrt(A[free] * cost[free])) / max(budget, 1e-300)
        prop = base * theta
        new_up = free & (prop > up)
        new_lo = free & (prop < lo)
        release = fixed_lo & (A > 0) & (prop > lo)
        if new_up.any():
            # fix only the worst offenders in one pass; the rest may fall back once budget shrinks
            fixed_up |= new_up
            continue
        if release.any():
            fixed_lo &= ~release
            continue
        if new_lo.any():
            fixed_lo |= new_lo
            continue
        break
    free = ~(fixed_lo | fixed_up)
    n = np.where(fixed_up, up, lo)
    if free.any():
        budget = 1.0 - np.sum(A[fixed_lo] / lo[fixed_lo]) - np.sum(A[fixed_up] / up[fixed_up])
        theta = np.sum(np.sqrt(A[free] * cost[free])) / max(budget, 1e-300)
        n[free] = np.clip(base[free] * theta, lo[free], up[free])
    return n


def bethel_arrays(
    N: np.ndarray,
    mean: np.ndarray,
    sd: np.ndarray,
    cost: np.ndarray,
    cv: np.ndarray,
    minnumstrat: int = 2,
    tol: float = 1e-10,
    maxiter: int = 200,
) -> Allocation:
    """Array form of :func:`bethel`; ``mean`` and ``sd`` are ``(H, q)``."""
    N = np.asarray(N, dtype=float)
    mean = np.asarray(mean, dtype=float).reshape(len(N), -1)
    sd = np.asarray(sd, dtype=float).reshape(len(N), -1)
    cost = np.broadcast_to(np.asarray(cost, dtype=float), N.shape).astype(float)
    cv = np.asarray(cv, dtype=float)
    H, q = mean.shape
    if cv.shape != (q,):
        raise AllocationError(f"expected {q} CV bounds, got {cv.shape}")
    lo = np.minimum(float(minnumstrat), N)
    up = N.copy()
    T = (N[:, None] * mean).sum(axis=0)
    varz = (N[:, None] * sd) ** 2
    active = varz.sum(axis=0) > 0
    if np.any(active & (T == 0)):
        raise AllocationError("zero total for a constrained variable: CV is not defined")
    if not active.any():
        n = lo.copy()
        return Allocation(np.ceil(n).astype(int), n, True, 0)
    a = np.zeros((H, q))
    a[:, active] = varz[:, active] / (cv[active] * T[active]) ** 2
    b = a / (1.0 + (a / N[:, None]).sum(axis=0))
    b = b[:, active]

    alpha = np.full(b.shape[1], 1.0 / b.shape[1])
    converged = False
    it = 0
    n = lo.copy()
    for it in range(1, maxiter + 1):
        n = _scalar_allocation(b @ alpha, cost, lo, up)
        g = (b / n[:, None]).sum(axis=0)
        w = alpha * g * g
        tot = w.sum()
        if tot <= 0:
            converged = True
            break
        nxt = w / tot
        delta = np.max(np.abs(nxt - alpha))
        alpha = nxt
        if delta < tol:
            converged = True
            break
    n = _make_feasible(n, b, lo, up)
    return Allocation(np.ceil(n - 1e-9).astype(int), n, converged, it)


def _make_feasible(n, b, lo, up):
    # scale the interior strata until every constraint holds; take-all strata add no variance
    for _ in range(50):
        g = (b / n[:, None] - b / up[:, None]).sum(axis=0)
        need = (1.0 - (b / up[:, None]).sum(axis=0))
        worst = np.max(g / np.maximum(need, 1e-300))
        if worst <= 1.0 + 1e-12:
            break
        interior = n < up
        n = np.where(interior, np.minimum(n * worst * (1 + 1e-12), up), n)
    return n


def _summaries_arrays(strata: Sequence[StratumSummary]):
    N = np.array([s.N for s in strata], dtype=float)
    mean = np.vstack([s.mean for s in strata])
    sd = np.vstack([s.sd for s in strata])
    cost = np.array([s.cost for s in strata], dtype=float)
    return N, mean, sd, cost


def bethel(strata: Sequence[StratumSummary], cv, minnumstrat: int = 2, tol: float = 1e-10, maxiter: int = 200) -> Allocation:
    """Allocate a sample over the strata of one domain.

    ``cv`` is either a vector of bounds, one per target, or a
    ``PrecisionConstraints`` table looked up by the strata's domain.
    """
    doms = {s.dom for s in strata}
    if len(doms) != 1:
        raise AllocationError("bethel allocates one domain at a time")
    if hasattr(cv, "for_domain"):
        cv = cv.for_domain(doms.pop())
    N, mean, sd, cost = _summaries_arrays(strata)
    alloc = bethel_arrays(N, mean, sd, cost, np.asarray(cv, dtype=float), minnumstrat, tol, maxiter)
    for s, nh in zip(strata, alloc.n):
        s.n = int(nh)
    return alloc


def cv_arrays(N, mean, sd, n) -> np.ndarray:
    N = np.asarray(N, dtype=float)
    n = np.asarray(n, dtype=float)
    mean = np.asarray(mean, dtype=float).reshape(len(N), -1)
    sd = np.asarray(sd, dtype=float).reshape(len(N), -1)
    if np.any(n <= 0):
        raise AllocationError("every stratum needs n_h >= 1")
    v = ((N**2 * (1.0 - n / N) / n)[:, None] * sd**2).sum(axis=0)
    T = (N[:, None] * mean).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(v == 0, 0.0, np.sqrt(np.maximum(v, 0.0)) / np.abs(T))


def expected_cv(strata: Sequence[StratumSummary], allocation: Allocation | Sequence[int] | None = None) -> dict[int, np.ndarray]:
    """Expected CV per target for each domain at the integer allocation."""
    if allocation is None:
        n_all = np.array([s.n for s in strata], dtype=float)
    elif isinstance(allocation, Allocation):
        n_all = allocation.n.astype(float)
    else:
        n_all = np.asarray(allocation, dtype=float)
    if len(n_all) != len(strata) or np.any(np.isnan(n_all)):
        raise AllocationError("allocation does not cover all strata")
    out = {}
    doms = np.array([s.dom for s in strata])
    for d in np.unique(doms):
        idx = np.flatnonzero(doms == d)
        N, mean, sd, _ = _summaries_arrays([strata[i] for i in idx])
        out[int(d)] = cv_arrays(N, mean, sd, n_all[idx])
    return out
