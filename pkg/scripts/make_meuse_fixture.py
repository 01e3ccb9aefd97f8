"""Regenerate the meuse prediction fixtures under ``tests/fixtures``.

The 155 meuse soil samples (``meuse_samples.csv``, the table shipped with the
R ``sp`` package and redistributed by scikit-gstat) are the only input.  The
3103-cell ``meuse.grid`` frame is not redistributable here, so it is rebuilt
on the same 40 m lattice: cells inside a closed buffer around the sample
locations, with the buffer radius chosen to give 3103 cells.  Grid ``dist`` is
linearly interpolated from the samples, ``soil`` is nearest-sample.

Each metal is predicted with universal kriging, ``metal ~ dist + soil``, under
an exponential covariance plus nugget.  Lead uses the variogram published for
the case study (nugget 1524.895, psill 8275.431, range 458.3303); the other
metals start from a weighted least squares fit of the residual variogram.
In every case the nugget and partial sill are then refitted with the range
held fixed, as gstat's ``fit.lmc`` does before prediction.

Run from the repository root::

    python scripts/make_meuse_fixture.py
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.interpolate import griddata
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

HERE = Path(__file__).resolve().parent
OUT = HERE.parent / "tests" / "fixtures"

CELL = 40.0
X0, X1 = 178460.0, 181540.0
Y0, Y1 = 329620.0, 333740.0
N_GRID = 3103

LEAD_VGM = {"nugget": 1524.895, "psill": 8275.431, "range": 458.3303}


def build_grid(samples: pd.DataFrame) -> pd.DataFrame:
    xs = np.arange(X0, X1 + CELL / 2, CELL)
    ys = np.arange(Y0, Y1 + CELL / 2, CELL)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    tree = cKDTree(samples[["x", "y"]].to_numpy())
    nearest, _ = tree.query(pts)
    nearest = nearest.reshape(gx.shape)

    def mask_for(radius: float) -> np.ndarray:
        m = nearest <= radius
        m = ndimage.binary_closing(m, structure=np.ones((5, 5)), iterations=2)
        return ndimage.binary_fill_holes(m)

    lo, hi = 40.0, 600.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mask_for(mid).sum() < N_GRID:
            lo = mid
        else:
            hi = mid
    mask = mask_for(hi)
    # trim the farthest cells so the count matches exactly
    cells = np.flatnonzero(mask.ravel())
    order = np.argsort(nearest.ravel()[cells], kind="stable")
    keep = np.sort(cells[order[:N_GRID]])
    grid = pd.DataFrame({"x": pts[keep, 0], "y": pts[keep, 1]})

    sxy = samples[["x", "y"]].to_numpy()
    dist = griddata(sxy, samples["dist"].to_numpy(), grid[["x", "y"]].to_numpy(), method="linear")
    near = griddata(sxy, samples["dist"].to_numpy(), grid[["x", "y"]].to_numpy(), method="nearest")
    grid["dist"] = np.where(np.isnan(dist), near, dist).clip(0.0, 1.0)
    _, idx = tree.query(grid[["x", "y"]].to_numpy())
    grid["soil"] = samples["soil"].to_numpy()[idx]
    grid.insert(0, "id", np.arange(1, len(grid) + 1))
    return grid


def design(dist: np.ndarray, soil: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones_like(dist), dist, soil == 2, soil == 3]).astype(float)


def empirical_variogram(xy: np.ndarray, r: np.ndarray, nbins: int = 15):
    d = cdist(xy, xy)
    iu = np.triu_indices(len(r), 1)
    h = d[iu]
    g = 0.5 * (r[iu[0]] - r[iu[1]]) ** 2
    span = np.hypot(*(xy.max(axis=0) - xy.min(axis=0)))
    cutoff = span / 3.0
    edges = np.linspace(0.0, cutoff, nbins + 1)
    which = np.digitize(h, edges) - 1
    rows = []
    for b in range(nbins):
        sel = which == b
        if sel.sum() > 0:
            rows.append((h[sel].mean(), g[sel].mean(), sel.sum()))
    return np.array(rows)


def fit_exponential(vg: np.ndarray) -> dict:
    h, g, npairs = vg.T
    w = np.sqrt(npairs / h**2)

    def resid(p):
        nug, ps, rng = np.exp(p)
        return w * (nug + ps * (1 - np.exp(-h / rng)) - g)

    sill = g[-3:].mean()
    p0 = np.log([0.2 * sill, 0.8 * sill, h.max() / 3])
    fit = least_squares(resid, p0)
    nug, ps, rng = np.exp(fit.x)
    return {"nugget": float(nug), "psill": float(ps), "range": float(rng)}


def refit_sills(vg: np.ndarray, rng: float) -> dict:
    """Refit nugget and partial sill with the range held fixed."""
    h, g, npairs = vg.T
    w = np.sqrt(npairs / h**2)
    A = np.column_stack([np.ones_like(h), 1 - np.exp(-h / rng)])
    (nug, ps), *_ = np.linalg.lstsq(A * w[:, None], g * w, rcond=None)
    return {"nugget": float(max(nug, 0.0)), "psill": float(ps), "range": float(rng)}


def universal_krige(sxy, z, sF, gxy, gF, vgm):
    nug, ps, rng = vgm["nugget"], vgm["psill"], vgm["range"]

    def cov(d):
        c = ps * np.exp(-d / rng)
        return c + np.where(d == 0.0, nug, 0.0)

    n, p = sF.shape
    K = np.zeros((n + p, n + p))
    K[:n, :n] = cov(cdist(sxy, sxy))
    K[:n, n:] = sF
    K[n:, :n] = sF.T
    rhs = np.zeros((n + p, len(gxy)))
    k0 = cov(cdist(sxy, gxy))
    rhs[:n] = k0
    rhs[n:] = gF.T
    sol = np.linalg.solve(K, rhs)
    lam, mu = sol[:n], sol[n:]
    pred = lam.T @ z
    var = (ps + nug) - np.sum(lam * k0, axis=0) - np.sum(mu * gF.T, axis=0)
    return pred, np.maximum(var, 0.0)


def main() -> None:
    samples = pd.read_csv(HERE / "meuse_samples.csv")
    samples["soil"] = samples["soil"].astype(int)
    grid = build_grid(samples)
    sxy = samples[["x", "y"]].to_numpy(float)
    gxy = grid[["x", "y"]].to_numpy(float)
    sF = design(samples["dist"].to_numpy(float), samples["soil"].to_numpy())
    gF = design(grid["dist"].to_numpy(float), grid["soil"].to_numpy())

    out = pd.DataFrame({"id": grid["id"]})
    variograms = {}
    for metal in ("cadmium", "copper", "lead", "zinc"):
        z = samples[metal].to_numpy(float)
        beta, *_ = np.linalg.lstsq(sF, z, rcond=None)
        vg = empirical_variogram(sxy, z - sF @ beta)
        start = dict(LEAD_VGM) if metal == "lead" else fit_exponential(vg)
        vgm = refit_sills(vg, start["range"])
        variograms[metal] = vgm
        pred, var = universal_krige(sxy, z, sF, gxy, gF, vgm)
        out[f"{metal}.pred"] = pred
        out[f"{metal}.var"] = var
    out["lon"] = grid["x"]
    out["lat"] = grid["y"]
    out["dom"] = 1

    OUT.mkdir(parents=True, exist_ok=True)
    out.to_csv(OUT / "meuse_grid_preds.csv", index=False, float_format="%.10g")
    (OUT / "meuse_variograms.json").write_text(json.dumps(variograms, indent=2) + "\n")
    pd.DataFrame(
        {"DOM": ["DOM1"], "CV1": [0.05], "domainvalue": [1]}
    ).to_csv(OUT / "meuse_cv_uni.csv", index=False)
    pd.DataFrame(
        {"DOM": ["DOM1"], "CV1": [0.05], "CV2": [0.05], "CV3": [0.05], "CV4": [0.05], "domainvalue": [1]}
    ).to_csv(OUT / "meuse_cv_multi.csv", index=False)
    print(json.dumps(variograms, indent=2))
    print(out.describe().T)


if __name__ == "__main__":
    main()
