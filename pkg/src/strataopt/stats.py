"""Per-stratum moments, anticipated variance and spatial stratum variance.

All variances use divisor ``N`` so that the pairwise form
``(1/N**2) * sum_{i<j} (z_i - z_j)**2`` and the moment form agree.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import sparse, stats as sps
from scipy.spatial import cKDTree

MODEL_KINDS = ("none", "linear", "loglinear", "spatial")

# exact pairwise sums up to this many units per stratum, pair subsampling above
EXACT_PAIR_UNITS = 20000
SUBSAMPLE_PAIRS = 2_000_000
_CHUNK = 2048


class InvalidModelInput(ValueError):
    pass


@dataclass
class StratumSummary:
    label: int
    N: int
    mean: np.ndarray
    sd: np.ndarray
    cost: float = 1.0
    dom: int = 1
    n: float | None = None

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.sd = np.atleast_1d(np.asarray(self.sd, dtype=float))


@dataclass(frozen=True)
class ModelSpec:
    """Anticipated-variance model linking a frame proxy ``Y`` to the target.

    ``lag`` names the frame column holding the spatially lagged regressor
    ``W Y`` for kind ``spatial``.
    """

    kind: str = "none"
    beta: float = 1.0
    sig2: float = 0.0
    gamma: float = 0.0
    beta2: float = 0.0
    range: float | None = None
    fitting: float = 1.0
    lag: str | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise InvalidModelInput(f"unknown model kind {self.kind!r}")
        if self.sig2 < 0:
            raise InvalidModelInput("sig2 must be nonnegative")
        if self.gamma < 0:
            raise InvalidModelInput("gamma must be nonnegative")
        if not 0 < self.fitting <= 1:
            raise InvalidModelInput("fitting must lie in (0, 1]")
        if self.kind == "spatial" and not (self.range and self.range > 0):
            raise InvalidModelInput("spatial model needs range > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = {("kind" if k == "type" else k): v for k, v in d.items()}
        return cls(**d)


@dataclass(frozen=True)
class GammaFit:
    gamma: float
    sigma: float
    r_square: float


@dataclass(frozen=True)
class MoranResult:
    I: float
    z_score: float
    p_value: float
    expected: float
    variance: float
    degenerate: bool = False


def summarize(frame, assignment, y: np.ndarray | None = None) -> list[StratumSummary]:
    """One summary per nonempty (domain, label) pair, sorted by domain then label."""
    labels = np.asarray(assignment)
    yy = frame.y if y is None else np.asarray(y, dtype=float).reshape(len(labels), -1)
    out = []
    keys = np.column_stack([frame.domain, labels])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    for g, (dom, lab) in enumerate(uniq):
        sel = inv == g
        vals = yy[sel]
        out.append(
            StratumSummary(
                label=int(lab),
                N=int(sel.sum()),
                mean=vals.mean(axis=0),
                sd=vals.std(axis=0),
                cost=float(frame.weight[sel].mean()),
                dom=int(dom),
            )
        )
    return out


def unit_moments(y: np.ndarray, model: ModelSpec, lag: np.ndarray | None = None):
    """Per-unit conditional mean and variance of the target given the proxy."""
    y = np.asarray(y, dtype=float)
    if model.kind == "none":
        return y.copy(), np.zeros_like(y)
    if model.kind == "loglinear":
        if np.any(y <= 0):
            raise InvalidModelInput("loglinear model requires strictly positive Y")
        e = np.exp(model.sig2)
        return y**model.beta * np.sqrt(e), y ** (2 * model.beta) * e * (e - 1.0)
    if model.gamma > 0 and np.any(y < 0):
        raise InvalidModelInput("heteroscedastic model requires nonnegative Y")
    v = model.sig2 * y ** (2 * model.gamma)
    m = model.beta * y
    if model.kind == "spatial":
        if lag is None:
            raise InvalidModelInput("spatial model needs the lagged regressor column")
        m = m + model.beta2 * np.asarray(lag, dtype=float)
    return m, v


def anticipated_moments(
    y: np.ndarray,
    model: ModelSpec,
    lag: np.ndarray | None = None,
    coords: np.ndarray | None = None,
    kappa: float = 1.0,
) -> tuple[float, float]:
    """Anticipated (mean, sd) of the target over one stratum.

    For kinds none/linear/loglinear the stratum variance is the variance of
    the conditional means plus the mean conditional variance.  Kind
    ``spatial`` routes the conditional moments through the pairwise form,
    subtracting the exponential autocovariance of the errors.
    """
    m, v = unit_moments(y, model, lag)
    if model.kind == "spatial":
        if coords is None:
            raise InvalidModelInput("spatial model needs coordinates")
        sd = spatial_stratum_sd(m, v, coords, fitting=model.fitting, range=model.range, kappa=kappa)
        return float(m.mean()), float(sd)
    return float(m.mean()), float(np.sqrt(m.var() + v.mean()))


def anticipated_sd(summary: StratumSummary, y: np.ndarray, models: Sequence[ModelSpec], **kw) -> np.ndarray:
    """Adjusted sd for every target of ``summary``; ``y`` is the stratum's ``(N, q)`` proxy values."""
    y = np.asarray(y, dtype=float).reshape(summary.N, -1)
    lags = kw.pop("lags", None)
    out = summary.sd.copy()
    for k, model in enumerate(models):
        if model.kind == "none":
            continue
        lag = None if lags is None else lags[:, k]
        out[k] = anticipated_moments(y[:, k], model, lag=lag, **kw)[1]
    return out


def anticipate(summary: StratumSummary, y: np.ndarray, models: Sequence[ModelSpec], **kw) -> StratumSummary:
    """``summary`` with mean and sd replaced by their anticipated values."""
    y = np.asarray(y, dtype=float).reshape(summary.N, -1)
    lags = kw.pop("lags", None)
    mean, sd = summary.mean.copy(), summary.sd.copy()
    for k, model in enumerate(models):
        lag = None if lags is None else lags[:, k]
        mean[k], sd[k] = anticipated_moments(y[:, k], model, lag=lag, **kw)
    return replace(summary, mean=mean, sd=sd)


def _cov_quadratic(s: np.ndarray, coords: np.ndarray, scale: float) -> float:
    """``sum_{i,j} s_i s_j exp(-d_ij * scale)`` without materialising the full matrix."""
    total = 0.0
    for a in range(0, len(s), _CHUNK):
        blk = coords[a : a + _CHUNK]
        d = np.sqrt(((blk[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
        total += float(s[a : a + _CHUNK] @ np.exp(-scale * d) @ s)
    return total


def spatial_stratum_sd(
    y: np.ndarray,
    var: np.ndarray,
    coords: np.ndarray,
    fitting: float = 1.0,
    range: float = 1.0,
    kappa: float = 1.0,
    rng: np.random.Generator | None = None,
    return_se: bool = False,
):
    """Stratum sd from model-adjusted pairwise squared differences.

    ``D_ij**2 = (y_i - y_j)**2 / fitting + s_i**2 + s_j**2
    - 2 s_i s_j exp(-kappa d_ij / range)`` and ``S**2 = sum_{i<j} D_ij**2 / N**2``.
    Prediction and variance terms are summed exactly; the covariance term
    is exact for strata up to ``EXACT_PAIR_UNITS`` units and estimated from
    uniformly drawn pairs above that, in which case the relative standard
    error of ``S**2`` is available via ``return_se``.
    """
    y = np.asarray(y, dtype=float)
    var = np.asarray(var, dtype=float)
    coords = np.asarray(coords, dtype=float).reshape(len(y), -1)
    if not fitting > 0:
        raise InvalidModelInput("fitting (R squared) must be positive")
    if not range > 0 or not kappa > 0:
        raise InvalidModelInput("range and kappa must be positive")
    N = len(y)
    if N <= 1:
        return (0.0, 0.0) if return_se else 0.0
    s = np.sqrt(var)
    pred_term = N * N * y.var() / fitting
    var_term = (N - 1) * var.sum()
    rel_se = 0.0
    if N <= EXACT_PAIR_UNITS:
        cross = _cov_quadratic(s, coords, kappa / range) - var.sum()
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        i = rng.integers(0, N, SUBSAMPLE_PAIRS)
        j = rng.integers(0, N - 1, SUBSAMPLE_PAIRS)
        j = j + (j >= i)
        d = np.sqrt(((coords[i] - coords[j]) ** 2).sum(-1))
        terms = s[i] * s[j] * np.exp(-kappa * d / range)
        npairs = N * (N - 1)
        cross = npairs * terms.mean()
        se_cross = npairs * terms.std() / np.sqrt(SUBSAMPLE_PAIRS)
    # sum_{i<j} D^2 = N^2 var(y)/R2 + (N-1) sum v - sum_{i != j} s_i s_j rho_ij
    s2 = (pred_term + var_term - cross) / (N * N)
    if N > EXACT_PAIR_UNITS:
        rel_se = se_cross / (N * N) / s2 if s2 > 0 else np.inf
    s2 = max(s2, 0.0)
    sd = float(np.sqrt(s2))
    return (sd, float(rel_se)) if return_se else sd


class SpatialKernel:
    """Precomputed ``s_i s_j exp(-kappa d_ij / range)`` matrices for one domain.

    Used by the optimizer to evaluate many stratifications of the same units:
    the covariance sum of every stratum comes from one matrix product with
    the label indicator matrix.
    """

    def __init__(self, m: np.ndarray, v: np.ndarray, coords: np.ndarray, fitting, range, kappa: float = 1.0):
        self.m = np.asarray(m, dtype=float)
        self.v = np.asarray(v, dtype=float)
        n, q = self.m.shape
        self.fitting = np.broadcast_to(np.asarray(fitting, dtype=float), (q,)).copy()
        self.range = np.broadcast_to(np.asarray(range, dtype=float), (q,)).copy()
        if np.any(self.fitting <= 0) or np.any(self.range <= 0):
            raise InvalidModelInput("fitting and range must be positive")
        dtype = np.float64 if n * n * q * 8 <= 400e6 else np.float32
        coords = np.asarray(coords, dtype=float)
        dist = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)).astype(dtype)
        s = np.sqrt(self.v).astype(dtype)
        self.mats = []
        for k in np.arange(q):
            mat = np.exp(dist * dtype(-kappa / self.range[k]))
            mat *= s[:, k][:, None]
            mat *= s[:, k][None, :]
            self.mats.append(mat)
        del dist

    def stratum_moments(self, labels: np.ndarray, H: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Counts ``(H,)``, means ``(H, q)`` and sds ``(H, q)`` for labels in ``0..H-1``."""
        N = np.bincount(labels, minlength=H).astype(float)
        L = np.zeros((len(labels), H), dtype=self.mats[0].dtype)
        L[np.arange(len(labels)), labels] = 1.0
        q = self.m.shape[1]
        means = np.empty((H, q))
        sds = np.empty((H, q))
        Ns = np.maximum(N, 1.0)
        for k in range(q):
            sm = np.bincount(labels, self.m[:, k], H)
            sm2 = np.bincount(labels, self.m[:, k] ** 2, H)
            sv = np.bincount(labels, self.v[:, k], H)
            quad = np.einsum("ih,ih->h", L, self.mats[k] @ L).astype(float)
            mu = sm / Ns
            ssq = np.maximum(sm2 - Ns * mu**2, 0.0)
            s2 = (Ns * ssq / self.fitting[k] + (Ns - 1) * sv - (quad - sv)) / Ns**2
            means[:, k] = mu
            sds[:, k] = np.sqrt(np.maximum(s2, 0.0))
        return N, means, sds


def compute_gamma(residuals, x, nbins: int = 6) -> GammaFit:
    """Heteroscedasticity index from binned residual spread.

    Units are split into ``nbins`` equal-count groups by ``x`` (stable order
    on ties); ``log(sd(residuals))`` is regressed on ``log(mean(x))`` across
    groups.  Returns slope, exponentiated intercept and the regression R².
    """
    e = np.asarray(residuals, dtype=float)
    x = np.asarray(x, dtype=float)
    if e.shape != x.shape:
        raise ValueError("residuals and x must have the same length")
    if nbins < 2 or len(e) < 2 * nbins:
        raise ValueError("need nbins >= 2 and at least 2 units per bin")
    if np.any(x < 0):
        raise ValueError("x must be nonnegative")
    order = np.argsort(x, kind="stable")
    sds, mx = [], []
    for grp in np.array_split(order, nbins):
        sd = e[grp].std(ddof=1)
        m = x[grp].mean()
        if sd > 0 and m > 0:
            sds.append(sd)
            mx.append(m)
    if len(sds) < 2:
        raise ValueError("fewer than 2 usable bins for gamma estimation")
    lx, ls = np.log(mx), np.log(sds)
    slope, intercept = np.polyfit(lx, ls, 1)
    fitted = intercept + slope * lx
    ss_tot = ((ls - ls.mean()) ** 2).sum()
    r2 = 1.0 - ((ls - fitted) ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return GammaFit(gamma=float(slope), sigma=float(np.exp(intercept)), r_square=float(min(max(r2, 0.0), 1.0)))


def neighbor_weights(coords: np.ndarray, k: int | None = None, threshold: float | None = None) -> sparse.csr_matrix:
    """Row-standardised binary neighbour matrix (k nearest, or within ``threshold``)."""
    coords = np.asarray(coords, dtype=float)
    n = len(coords)
    tree = cKDTree(coords)
    if threshold is not None:
        pairs = tree.query_pairs(threshold, output_type="ndarray")
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    else:
        k = 4 if k is None else k
        if k >= n:
            raise ValueError("k must be smaller than the number of units")
        _, nn = tree.query(coords, k=k + 1)
        rows = np.repeat(np.arange(n), k)
        cols = nn[:, 1:].ravel()
    w = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    rs = np.asarray(w.sum(axis=1)).ravel()
    rs[rs == 0] = 1.0
    return sparse.diags(1.0 / rs) @ w


def morans_i(values, coords, k: int | None = 4, threshold: float | None = None) -> MoranResult:
    """Moran's I with a normality-based z test (two-sided)."""
    z = np.asarray(values, dtype=float)
    n = len(z)
    if n < 3:
        raise ValueError("Moran's I needs at least 3 units")
    expected = -1.0 / (n - 1)
    dev = z - z.mean()
    if np.allclose(dev, 0.0):
        return MoranResult(np.nan, np.nan, np.nan, expected, np.nan, degenerate=True)
    w = neighbor_weights(coords, k=None if threshold is not None else min(k, n - 1), threshold=threshold)
    s0 = w.sum()
    I = n / s0 * float(dev @ (w @ dev)) / float(dev @ dev)
    wt = w + w.T
    s1 = 0.5 * wt.multiply(wt).sum()
    s2 = float(((np.asarray(w.sum(axis=1)).ravel() + np.asarray(w.sum(axis=0)).ravel()) ** 2).sum())
    var = (n * n * s1 - n * s2 + 3 * s0 * s0) / (s0 * s0 * (n * n - 1)) - expected**2
    zs = (I - expected) / np.sqrt(var)
    p = 2 * sps.norm.sf(abs(zs))
    return MoranResult(float(I), float(zs), float(p), expected, float(var))
