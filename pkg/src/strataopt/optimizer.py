"""Genetic search over stratifications.

Three encodings share one GA loop:

* ``atomic`` -- a label per atomic stratum (cell of the cross-classified
  categorical X); crossover transfers whole groups between parents.
* ``continuous`` -- per stratification variable, ``nStrata - 1`` cut points
  stored as quantile positions in [0, 1].
* ``spatial`` -- the cut encoding, with stratum variances from the pairwise
  prediction/error/autocovariance form.

Each domain is optimized independently with its own generator.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .bethel import AllocationError, bethel_arrays, cv_arrays
from .frame import PrecisionConstraints, SamplingFrame, validate
from .stats import ModelSpec, SpatialKernel, StratumSummary, spatial_stratum_sd, unit_moments

log = logging.getLogger(__name__)

# dense pairwise kernels are built for domains up to this many units
DENSE_KERNEL_UNITS = 8000


class OptimizationError(RuntimeError):
    pass


class MethodError(ValueError):
    pass


@dataclass
class GAParams:
    iterations: int = 50
    pops: int = 10
    nStrata: int = 5
    mutation_prob: float | None = None
    elitism_rate: float = 0.2
    minnumstrat: int = 2
    seed: int = 1234
    workers: int = 1
    selection_pressure: float = 1.7
    cut_combine: str = "max"
    bethel_tol: float = 1e-10
    bethel_maxiter: int = 200

    def __post_init__(self):
        if self.pops < 2:
            raise ValueError("pops must be at least 2")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.nStrata < 1:
            raise ValueError("nStrata must be at least 1")
        if self.mutation_prob is not None and not 0 <= self.mutation_prob <= 1:
            raise ValueError("mutation_prob must lie in [0, 1]")
        if not 1 <= self.selection_pressure <= 2:
            raise ValueError("selection_pressure must lie in [1, 2]")
        if self.cut_combine not in ("max", "product"):
            raise ValueError("cut_combine must be 'max' or 'product'")

    def mutation_for(self, method: str) -> float:
        if self.mutation_prob is not None:
            return self.mutation_prob
        return 0.05 if method == "atomic" else 0.1

    @property
    def n_elite(self) -> int:
        return min(self.pops - 1, max(1, int(round(self.elitism_rate * self.pops))))


@dataclass
class SpatialParams:
    fitting: Sequence[float] | float = 1.0
    range: Sequence[float] | float = 1.0
    kappa: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        f = np.atleast_1d(np.asarray(self.fitting, dtype=float))
        r = np.atleast_1d(np.asarray(self.range, dtype=float))
        if np.any(f <= 0) or np.any(f > 1):
            raise ValueError("fitting must lie in (0, 1]")
        if np.any(r <= 0):
            raise ValueError("range must be positive")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    def per_variable(self, q: int) -> tuple[np.ndarray, np.ndarray]:
        f = np.broadcast_to(np.atleast_1d(np.asarray(self.fitting, dtype=float)), (q,)).copy()
        r = np.broadcast_to(np.atleast_1d(np.asarray(self.range, dtype=float)), (q,)).copy()
        return f, r


@dataclass
class AtomicTable:
    """Atomic strata of one frame: occupied X combinations per domain."""

    atom: np.ndarray  # per unit, index into ``keys``
    keys: list[tuple]  # (domain, x values...) per atom
    strata: list[StratumSummary]

    def for_domain(self, dom: int) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.keys) if k[0] == dom])


@dataclass
class Solution:
    method: str
    assignment: np.ndarray
    strata: list[StratumSummary]
    expected_cv: dict[int, np.ndarray]
    total_size: int
    genome: dict[int, np.ndarray]
    trace: dict[int, list[float]]
    cuts: dict[int, list[np.ndarray]] = field(default_factory=dict)
    converged: bool = True
    diagnostics: dict = field(default_factory=dict)

    @property
    def total_trace(self) -> list[float]:
        gens = max(len(t) for t in self.trace.values())
        return [float(sum(t[min(g, len(t) - 1)] for t in self.trace.values())) for g in range(gens)]

    def allocation_by_stratum(self) -> dict[tuple[int, int], int]:
        return {(s.dom, s.label): int(s.n) for s in self.strata}


# -- atomic strata ----------------------------------------------------------------


def build_atomic_strata(frame: SamplingFrame, y: np.ndarray | None = None) -> AtomicTable:
    """Cross-classify categorical X within each domain; empty cells are omitted."""
    for j, name in enumerate(frame.x_names):
        if frame.x_numeric[j] and len(frame):
            col = frame.x[:, j].astype(float)
            if np.any(col != np.round(col)):
                raise MethodError(f"stratification variable {name!r} is continuous; use method 'continuous'")
    codes = frame.x_codes()
    keys_arr = np.column_stack([frame.domain, codes])
    uniq, first, inv = np.unique(keys_arr, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    keys = [(int(frame.domain[i]), *tuple(frame.x[i])) for i in first]
    from .stats import summarize

    strata = summarize(frame, inv, y=y)
    return AtomicTable(atom=inv, keys=keys, strata=strata)


# -- genomes ------------------------------------------------------------------------


def compact(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Relabel to ``0..H-1`` in order of first label value, dropping empty labels."""
    uniq, inv = np.unique(labels, return_inverse=True)
    return inv.ravel(), len(uniq)


def decode_atomic(genome: np.ndarray, atom: np.ndarray) -> np.ndarray:
    """Per-unit labels from an atomic genome; atoms sharing a label collapse."""
    return compact(np.asarray(genome)[atom])[0]


def materialize_cuts(genome: np.ndarray, xsorted: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Cut values from quantile positions; duplicate cuts collapse."""
    out = []
    for k, xs in enumerate(xsorted):
        if len(xs) == 0 or genome.shape[1] == 0:
            out.append(np.empty(0))
            continue
        pos = np.rint(np.asarray(genome[k]) * (len(xs) - 1)).astype(int)
        c = np.unique(xs[pos])
        # a cut at the maximum leaves an empty top interval
        out.append(c[c < xs[-1]])
    return out


def decode_cuts(cuts: Sequence[np.ndarray], x: np.ndarray, combine: str = "max") -> np.ndarray:
    """Per-unit labels from cut values.

    Intervals are closed on the right at each cut.  ``combine='max'`` labels
    a unit by its highest interval index over the variables, which gives
    nested 7-shaped strata; ``'product'`` uses the full interval tuple.
    """
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    idx = np.column_stack([np.searchsorted(c, x[:, k], side="left") for k, c in enumerate(cuts)])
    if combine == "max":
        lab = idx.max(axis=1)
    else:
        lab = np.unique(idx, axis=0, return_inverse=True)[1].ravel()
    return compact(lab)[0]


def random_atomic(n_atoms: int, n_strata: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n_strata, n_atoms)


def random_cuts(p: int, n_strata: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.random((p, n_strata - 1)), axis=1)


def select_parents(fitness: Sequence[float], n_pairs: int, rng: np.random.Generator, pressure: float = 1.7) -> np.ndarray:
    """Linear-ranking selection; lower fitness is better.

    Ties share their average rank, so equal fitnesses give uniform selection.
    """
    f = np.asarray(fitness, dtype=float)
    n = len(f)
    if n == 1:
        return np.zeros((n_pairs, 2), dtype=int)
    f = np.where(np.isfinite(f), f, np.inf)
    # rank 1 = worst
    r = rankdata(-f, method="average")
    p = (2 - pressure) / n + 2 * (r - 1) * (pressure - 1) / (n * (n - 1))
    p = p / p.sum()
    return rng.choice(n, size=(n_pairs, 2), p=p)


def crossover_atomic(a: np.ndarray, b: np.ndarray, n_strata: int, rng: np.random.Generator) -> np.ndarray:
    """Inject a random set of parent-``a`` groups into parent ``b``."""
    groups = np.unique(a)
    k = int(rng.integers(1, max(1, n_strata // 2) + 1))
    chosen = rng.choice(groups, size=min(k, len(groups)), replace=False)
    child = b.copy()
    inject = np.isin(a, chosen)
    used = set(np.unique(child[~inject]).tolist())
    free = [l for l in range(n_strata) if l not in used]
    for g in chosen:
        if g not in used:
            lab = g
        elif free:
            lab = free.pop(0)
        else:
            lab = g
        if lab in free:
            free.remove(lab)
        used.add(lab)
        child[a == g] = lab
    return child


def crossover_cuts(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-variable one-point exchange of cut positions, re-sorted."""
    child = np.empty_like(a)
    c = a.shape[1]
    for k in range(a.shape[0]):
        r = int(rng.integers(0, c + 1))
        child[k] = np.sort(np.concatenate([a[k, :r], b[k, r:]]))
    return child


def crossover(a: np.ndarray, b: np.ndarray, rng: np.random.Generator, n_strata: int | None = None) -> np.ndarray:
    if a.ndim == 1:
        return crossover_atomic(a, b, n_strata or int(max(a.max(), b.max())) + 1, rng)
    return crossover_cuts(a, b, rng)


def mutate(genome: np.ndarray, mutation_prob: float, rng: np.random.Generator, n_strata: int | None = None) -> np.ndarray:
    """Atomic: resample labels uniformly; cuts: perturb or redraw positions."""
    g = genome.copy()
    hit = rng.random(g.shape) < mutation_prob
    if not hit.any():
        return g
    if g.ndim == 1:
        g[hit] = rng.integers(0, n_strata, hit.sum())
        return g
    redraw = rng.random(g.shape) < 0.5
    jitter = np.clip(g + rng.normal(0.0, 0.05, g.shape), 0.0, 1.0)
    fresh = rng.random(g.shape)
    g = np.where(hit, np.where(redraw, fresh, jitter), g)
    return np.sort(g, axis=1)


# -- fitness ------------------------------------------------------------------------


def _unit_model_moments(frame: SamplingFrame, idx: np.ndarray, method: str, models, spatial: SpatialParams | None):
    """Per-unit target moments and variance mode (``av`` or ``pair``) per variable."""
    q = len(frame.y_names)
    y = frame.y[idx]
    m = np.empty_like(y)
    v = np.empty_like(y)
    modes, fitting, rng_ = [], np.ones(q), np.ones(q)
    if method == "spatial":
        if spatial is None:
            raise MethodError("method 'spatial' needs SpatialParams")
        fitting, rng_ = spatial.per_variable(q)
        m[:] = y
        v[:] = frame.var[idx]
        if spatial.gamma > 0:
            if np.any(y < 0):
                raise MethodError("gamma > 0 requires nonnegative predictions")
            v *= y ** (2 * spatial.gamma)
        modes = ["pair"] * q
        return m, v, modes, fitting, rng_
    models = list(models or [ModelSpec()] * q)
    if len(models) != q:
        raise MethodError(f"{len(models)} models given for {q} targets")
    for k, model in enumerate(models):
        lag = frame.extra[model.lag][idx] if model.kind == "spatial" else None
        m[:, k], v[:, k] = unit_moments(y[:, k], model, lag)
        if model.kind == "spatial":
            modes.append("pair")
            fitting[k], rng_[k] = model.fitting, model.range
        else:
            modes.append("av")
    return m, v, modes, fitting, rng_


class DomainProblem:
    """Everything needed to score stratifications of one domain."""

    def __init__(
        self,
        frame: SamplingFrame,
        constraints: PrecisionConstraints,
        method: str,
        params: GAParams,
        models: Sequence[ModelSpec] | None = None,
        spatial: SpatialParams | None = None,
        domain: int | None = None,
        atomic: AtomicTable | None = None,
    ):
        self.method = method
        self.params = params
        self.domain = int(frame.domain[0] if domain is None else domain)
        self.idx = np.flatnonzero(frame.domain == self.domain)
        if len(self.idx) == 0:
            raise OptimizationError(f"domain {self.domain} has no units")
        self.cv = constraints.for_domain(self.domain)
        self.cost = frame.weight[self.idx]
        self.m, self.v, self.modes, self.fitting, self.range = _unit_model_moments(frame, self.idx, method, models, spatial)
        self.kappa = spatial.kappa if spatial is not None else 1.0
        self.pair = np.array([md == "pair" for md in self.modes])
        self.kernel = None
        self.coords = None
        if self.pair.any():
            if not frame.has_coordinates:
                raise MethodError("spatial variance needs unit coordinates")
            self.coords = frame.coords[self.idx]
            if len(self.idx) <= DENSE_KERNEL_UNITS:
                self.kernel = SpatialKernel(
                    self.m[:, self.pair], self.v[:, self.pair], self.coords,
                    self.fitting[self.pair], self.range[self.pair], self.kappa,
                )
        if method == "atomic":
            table = atomic if atomic is not None else build_atomic_strata(frame)
            self.atom_ids = table.for_domain(self.domain)
            local = {a: i for i, a in enumerate(self.atom_ids)}
            self.atom = np.array([local[a] for a in table.atom[self.idx]])
            self.n_atoms = len(self.atom_ids)
        else:
            self.x = frame.x[self.idx].astype(float)
            self.xsorted = [np.sort(self.x[:, k]) for k in range(self.x.shape[1])]
        self.infeasible_count = 0
        self.nonconverged = 0

    # genome handling
    def random_genome(self, rng):
        if self.method == "atomic":
            return random_atomic(self.n_atoms, self.params.nStrata, rng)
        return random_cuts(self.x.shape[1], self.params.nStrata, rng)

    def labels(self, genome) -> np.ndarray:
        if self.method == "atomic":
            return decode_atomic(genome, self.atom)
        return decode_cuts(materialize_cuts(genome, self.xsorted), self.x, self.params.cut_combine)

    def strata_moments(self, labels: np.ndarray, rng=None):
        H = int(labels.max()) + 1 if len(labels) else 0
        N = np.bincount(labels, minlength=H).astype(float)
        q = self.m.shape[1]
        mean = np.empty((H, q))
        sd = np.empty((H, q))
        for k in np.flatnonzero(~self.pair):
            sm = np.bincount(labels, self.m[:, k], H)
            sm2 = np.bincount(labels, self.m[:, k] ** 2, H)
            sv = np.bincount(labels, self.v[:, k], H)
            mu = sm / N
            mean[:, k] = mu
            sd[:, k] = np.sqrt(np.maximum(sm2 / N - mu**2, 0.0) + sv / N)
        if self.pair.any():
            if self.kernel is not None:
                _, pm, psd = self.kernel.stratum_moments(labels, H)
                mean[:, self.pair] = pm
                sd[:, self.pair] = psd
            else:
                for h in range(H):
                    sel = labels == h
                    for k in np.flatnonzero(self.pair):
                        mean[h, k] = self.m[sel, k].mean()
                        sd[h, k] = spatial_stratum_sd(
                            self.m[sel, k], self.v[sel, k], self.coords[sel],
                            fitting=self.fitting[k], range=self.range[k], kappa=self.kappa, rng=rng,
                        )
        cost = np.bincount(labels, self.cost, H) / N
        return N, mean, sd, cost

    def allocate(self, labels, rng=None):
        N, mean, sd, cost = self.strata_moments(labels, rng)
        alloc = bethel_arrays(
            N, mean, sd, cost, self.cv, self.params.minnumstrat, self.params.bethel_tol, self.params.bethel_maxiter
        )
        return alloc, (N, mean, sd, cost)

    def fitness(self, genome, rng=None) -> float:
        labels = self.labels(genome)
        try:
            alloc, (_, _, _, cost) = self.allocate(labels, rng)
        except AllocationError:
            self.infeasible_count += 1
            return math.inf
        if not alloc.converged:
            self.nonconverged += 1
            return math.inf
        return float((cost * alloc.n).sum())


def fitness(genome, frame, constraints, method, params=None, models=None, spatial=None, domain=None) -> float:
    """Sample cost of ``genome`` for one domain (builds the problem each call)."""
    params = params or GAParams()
    return DomainProblem(frame, constraints, method, params, models, spatial, domain).fitness(genome)


# -- GA loop ------------------------------------------------------------------------


@dataclass
class DomainResult:
    domain: int
    genome: np.ndarray
    fitness: float
    trace: list[float]
    infeasible: int
    nonconverged: int


def run_domain(problem: DomainProblem) -> DomainResult:
    params = problem.params
    method = problem.method
    rng = np.random.default_rng([params.seed, problem.domain])
    mut = params.mutation_for(method)
    needs_rng = problem.pair.any() and problem.kernel is None

    def score(g, gen, j):
        sub = np.random.default_rng([params.seed, problem.domain, gen, j]) if needs_rng else None
        return problem.fitness(g, sub)

    pop = [problem.random_genome(rng) for _ in range(params.pops)]
    fit = np.array([score(g, 0, j) for j, g in enumerate(pop)])
    best = int(np.argmin(fit))
    best_g, best_f = pop[best].copy(), float(fit[best])
    trace = [best_f]
    n_elite = params.n_elite
    for gen in range(1, params.iterations):
        order = np.argsort(fit, kind="stable")
        elites = [int(i) for i in order[:n_elite] if np.isfinite(fit[i])]
        n_child = params.pops - len(elites)
        pairs = select_parents(fit, n_child, rng, params.selection_pressure)
        children = []
        for ia, ib in pairs:
            c = crossover(pop[ia], pop[ib], rng, params.nStrata)
            children.append(mutate(c, mut, rng, params.nStrata))
        child_fit = [score(c, gen, j) for j, c in enumerate(children)]
        pop = [pop[i] for i in elites] + children
        fit = np.concatenate([fit[elites], child_fit])
        i = int(np.argmin(fit))
        if fit[i] < best_f:
            best_g, best_f = pop[i].copy(), float(fit[i])
        trace.append(best_f)
    return DomainResult(problem.domain, best_g, best_f, trace, problem.infeasible_count, problem.nonconverged)


def _run_domain_job(args):
    return run_domain(DomainProblem(*args))


def optimize(
    method: str,
    frame: SamplingFrame,
    constraints: PrecisionConstraints,
    params: GAParams | None = None,
    models: Sequence[ModelSpec] | None = None,
    spatial: SpatialParams | None = None,
) -> Solution:
    """Run the GA on every domain and assemble the best stratification."""
    params = params or GAParams()
    report = validate(frame, constraints, method)
    if not report.ok:
        raise OptimizationError("; ".join(report.errors))
    atomic = build_atomic_strata(frame) if method == "atomic" else None
    domains = [int(d) for d in frame.domains]
    if params.workers > 1 and len(domains) > 1:
        jobs = [(frame, constraints, method, params, models, spatial, d, atomic) for d in domains]
        with ProcessPoolExecutor(max_workers=params.workers) as ex:
            results = list(ex.map(_run_domain_job, jobs))
        problems = {d: DomainProblem(frame, constraints, method, params, models, spatial, d, atomic) for d in domains}
    else:
        problems = {d: DomainProblem(frame, constraints, method, params, models, spatial, d, atomic) for d in domains}
        results = [run_domain(problems[d]) for d in domains]
    return assemble_solution(method, frame, problems, results)


def assemble_solution(method, frame, problems: dict, results: Sequence[DomainResult]) -> Solution:
    assignment = np.zeros(len(frame), dtype=int)
    strata, ecv, genomes, traces, cuts = [], {}, {}, {}, {}
    total = 0
    converged = True
    diag = {}
    bad = [r.domain for r in results if not np.isfinite(r.fitness)]
    if bad:
        raise OptimizationError(f"no feasible stratification found for domain(s) {bad}")
    for r in results:
        prob = problems[r.domain]
        labels = prob.labels(r.genome)
        alloc, (N, mean, sd, cost) = prob.allocate(labels, np.random.default_rng([prob.params.seed, r.domain]))
        converged &= alloc.converged
        assignment[prob.idx] = labels + 1
        for h in range(len(N)):
            strata.append(StratumSummary(h + 1, int(N[h]), mean[h], sd[h], float(cost[h]), r.domain, int(alloc.n[h])))
        ecv[r.domain] = cv_arrays(N, mean, sd, alloc.n)
        total += alloc.total
        # atomic genomes are reported with labels 1..nStrata
        genomes[r.domain] = r.genome + 1 if method == "atomic" else r.genome
        traces[r.domain] = r.trace
        if method != "atomic":
            cuts[r.domain] = materialize_cuts(r.genome, prob.xsorted)
        diag[r.domain] = {"infeasible": r.infeasible, "nonconverged": r.nonconverged}
    return Solution(method, assignment, strata, ecv, total, genomes, traces, cuts, converged, diag)


# -- k-means exploration ------------------------------------------------------------


def kmeans_labels(y: np.ndarray, k: int, seed: int = 1234, n_init: int = 10) -> np.ndarray:
    from sklearn.cluster import KMeans

    z = np.asarray(y, dtype=float)
    sd = z.std(axis=0)
    z = (z - z.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    km = KMeans(n_clusters=k, n_init=n_init, random_state=seed).fit(z)
    return compact(km.labels_)[0]


def kmeans_solution(
    frame: SamplingFrame,
    constraints: PrecisionConstraints,
    method: str = "spatial",
    models: Sequence[ModelSpec] | None = None,
    spatial: SpatialParams | None = None,
    maxclusters: int = 10,
    params: GAParams | None = None,
    n_init: int = 10,
) -> list[tuple[int, int]]:
    """Sample size of k-means stratifications on the Y space for ``k = 2..maxclusters``.

    Sizes are summed over domains; a ``k`` exceeding the number of distinct
    Y rows of any domain is skipped with a warning.
    """
    params = params or GAParams()
    if maxclusters < 2:
        raise ValueError("maxclusters must be at least 2")
    problems = [DomainProblem(frame, constraints, method, params, models, spatial, int(d)) for d in frame.domains]
    curve = []
    distinct = {prob.domain: len(np.unique(frame.y[prob.idx], axis=0)) for prob in problems}
    for k in range(2, maxclusters + 1):
        short = [d for d, c in distinct.items() if k > c]
        if short:
            log.warning("k=%d exceeds the distinct Y rows of domain(s) %s; skipping", k, short)
            continue
        size = 0
        for prob in problems:
            labels = kmeans_labels(frame.y[prob.idx], k, params.seed, n_init)
            alloc, _ = prob.allocate(labels)
            size += alloc.total
        curve.append((k, int(size)))
    return curve
