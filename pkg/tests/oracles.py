"""Independent reference computations used by the tests."""

import itertools

import numpy as np


def cv_of(N, mean, sd, n):
    N, n = np.asarray(N, float), np.asarray(n, float)
    v = (N**2 * (1 - n / N) / n) @ (np.asarray(sd, float) ** 2)
    return np.sqrt(v) / np.abs(N @ np.asarray(mean, float))


def brute_force_allocation(N, mean, sd, cv, cost=None, minnumstrat=2):
    """Exhaustive integer search; returns (min cost, allocation) or (inf, None)."""
    N = np.asarray(N, int)
    cost = np.ones(len(N)) if cost is None else np.asarray(cost, float)
    mean = np.asarray(mean, float).reshape(len(N), -1)
    sd = np.asarray(sd, float).reshape(len(N), -1)
    grids = [np.arange(min(minnumstrat, Nh), Nh + 1) for Nh in N]
    mesh = np.array(np.meshgrid(*grids, indexing="ij")).reshape(len(N), -1).T.astype(float)
    fpc = N**2 * (1 - mesh / N) / mesh
    v = fpc @ sd**2
    T = N @ mean
    ok = np.all(np.sqrt(v) <= np.asarray(cv) * np.abs(T) * (1 + 1e-12), axis=1)
    if not ok.any():
        return np.inf, None
    c = mesh[ok] @ cost
    i = int(np.argmin(c))
    return float(c[i]), mesh[ok][i].astype(int)


def pairwise_variance(z):
    z = np.asarray(z, float)
    return sum((a - b) ** 2 for a, b in itertools.combinations(z, 2)) / len(z) ** 2
