"""Regenerate the synthetic Bologna enumeration-area frame under ``tests/fixtures``.

The census frame (2,234 enumeration areas, population P1 and foreign
residents ST1) is not public, so a stand-in is drawn from the published
fit only:

* P1 is a rounded gamma variable.  Shape and scale are solved so that the
  regression ``ST1 ~ P1`` has the published slope, residual standard error
  (15.41) and R squared (0.6251) under the heteroscedastic error model below.
* ``ST1 = 0.118006 P1 + 0.621012 P1**0.614648 e`` with standard normal ``e``,
  rounded and floored at zero.
* Coordinates are uniform on a disk of radius 6 km around the city centre (UTM 32N).

Run from the repository root::

    python scripts/make_bologna_fixture.py
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import fsolve
from scipy.special import gammaln

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

N_EA = 2234
BETA, GAMMA, SIGMA = 0.118006, 0.614648, 0.621012
RESID_SE, R_SQUARED = 15.41, 0.6251
CENTRE = (686000.0, 4930000.0)
RADIUS = 6000.0
SEED = 20110101


def gamma_parameters() -> tuple[float, float]:
    resid_var = RESID_SE**2
    p1_var = R_SQUARED / (1 - R_SQUARED) * resid_var / BETA**2

    def eq(p):
        k, t = np.exp(p)
        return [
            np.log(k * t * t) - np.log(p1_var),
            np.log(SIGMA**2) + 2 * GAMMA * np.log(t) + gammaln(k + 2 * GAMMA) - gammaln(k) - np.log(resid_var),
        ]

    k, t = np.exp(fsolve(eq, [0.0, 5.0]))
    return float(k), float(t)


def main() -> None:
    rng = np.random.default_rng(SEED)
    shape, scale = gamma_parameters()
    p1 = np.rint(rng.gamma(shape, scale, N_EA))
    e = rng.standard_normal(N_EA)
    st1 = np.maximum(np.rint(BETA * p1 + SIGMA * p1**GAMMA * e), 0.0)
    r = RADIUS * np.sqrt(rng.random(N_EA))
    a = rng.uniform(0, 2 * np.pi, N_EA)
    df = pd.DataFrame(
        {
            "id": np.arange(1, N_EA + 1),
            "X1": p1,
            "Y1": p1,
            "domainvalue": 1,
            "lon": np.round(CENTRE[0] + r * np.cos(a), 1),
            "lat": np.round(CENTRE[1] + r * np.sin(a), 1),
            "ST1": st1,
            "P1": p1,
        }
    )
    OUT.mkdir(parents=True, exist_ok=True)
    df.to_csv(OUT / "bologna_frame.csv", index=False, float_format="%.10g")
    pd.DataFrame({"DOM": ["DOM1"], "CV1": [0.03], "domainvalue": [1]}).to_csv(OUT / "bologna_cv.csv", index=False)
    print(f"gamma shape={shape:.4f} scale={scale:.3f}")
    print(df.describe().T)


if __name__ == "__main__":
    main()
