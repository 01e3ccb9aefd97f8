import numpy as np
import pandas as pd
import pytest

from strataopt.cli import main

from conftest import FIXTURES


@pytest.fixture
def small(tmp_path):
    r = np.random.default_rng(5)
    n = 120
    y = np.round(r.gamma(2, 20, n), 3)
    pd.DataFrame({"id": np.arange(1, n + 1), "X1": y, "Y1": y, "domainvalue": 1,
                  "lon": r.uniform(0, 100, n), "lat": r.uniform(0, 100, n), "T": 2 * y}).to_csv(tmp_path / "frame.csv", index=False)
    pd.DataFrame({"DOM": ["DOM1"], "CV1": [0.05], "domainvalue": [1]}).to_csv(tmp_path / "cv.csv", index=False)
    return tmp_path


def args(d, *extra):
    return ["--frame", str(d / "frame.csv"), "--constraints", str(d / "cv.csv"), "--out", str(d / "out"), *extra]


def test_validate_ok(small, capsys):
    assert main(["validate", *args(small, "--method", "continuous")]) == 0


def test_spatial_without_variance_fails(small):
    (small / "run.toml").write_text('method = "spatial"\n[spatial]\nfitting = 1.0\nrange = 10.0\n')
    rc = main(["validate", "--config", str(small / "run.toml"), *args(small)])
    assert rc == 1


def test_spatial_without_section_fails(small):
    assert main(["optimize", *args(small, "--method", "spatial")]) == 1


def test_malformed_csv_exit_2(small):
    (small / "frame.csv").write_text('id,X1,Y1,domainvalue\n1,"2,3\n')
    assert main(["validate", *args(small, "--method", "continuous")]) == 2


def test_missing_file_exit_2(small):
    (small / "frame.csv").unlink()
    assert main(["validate", *args(small, "--method", "continuous")]) == 2


def test_optimize_single_stratum(small):
    rc = main(["optimize", *args(small, "--method", "continuous", "--nstrata", "1", "--iter", "3", "--pops", "4")])
    assert rc == 0
    st = pd.read_csv(small / "out" / "strata.csv")
    assert len(st) == 1 and st["N"].iloc[0] == 120
    assn = pd.read_csv(small / "out" / "assignment.csv")
    assert list(assn.columns) == ["id", "dom", "stratum"] and set(assn["stratum"]) == {1}


def test_optimize_rerun_byte_identical(small):
    a = args(small, "--method", "continuous", "--iter", "5", "--pops", "6", "--seed", "11")
    assert main(["optimize", *a]) == 0
    first = {p.name: p.read_bytes() for p in (small / "out").iterdir()}
    assert main(["optimize", *a]) == 0
    second = {p.name: p.read_bytes() for p in (small / "out").iterdir()}
    assert first == second
    assert {"solution.json", "strata.csv", "assignment.csv", "trace.csv"} <= set(first)
    tr = pd.read_csv(small / "out" / "trace.csv")
    assert list(tr.columns) == ["generation", "total", "dom_1"]
    assert np.all(np.diff(tr["total"]) <= 0)


def test_kmeans_single_row(small):
    rc = main(["kmeans", *args(small, "--method", "continuous", "--maxclusters", "2")])
    assert rc == 0
    curve = pd.read_csv(small / "out" / "curve.csv")
    assert list(curve.columns) == ["k", "size"] and curve["k"].tolist() == [2]


def test_evaluate_and_select(small):
    a = args(small, "--method", "continuous", "--iter", "5", "--pops", "6")
    assert main(["optimize", *a]) == 0
    sol = ["--solution", str(small / "out")]
    assert main(["evaluate", *a, *sol, "--nsampl", "200"]) == 0
    rep = pd.read_csv(small / "out" / "report.csv")
    assert list(rep.columns) == ["dom", "variable", "cv", "bias"]
    assert main(["select", *a, *sol]) == 0
    smp = pd.read_csv(small / "out" / "sample.csv")
    st = pd.read_csv(small / "out" / "strata.csv")
    assert len(smp) == st["n"].sum()


def test_census_solution_zero_cv(small):
    a = args(small, "--method", "continuous")
    pd.DataFrame({"id": np.arange(1, 121), "dom": 1, "stratum": 1}).to_csv(small / "assignment.csv", index=False)
    pd.DataFrame({"dom": [1], "stratum": [1], "N": [120], "n": [120]}).to_csv(small / "strata.csv", index=False)
    assert main(["evaluate", *a, "--solution", str(small), "--nsampl", "100"]) == 0
    rep = pd.read_csv(small / "out" / "report.csv")
    assert np.allclose(rep["cv"], 0) and np.allclose(rep["bias"], 0)


def test_bologna_config_validates():
    assert main(["validate", "--config", str(FIXTURES.parent.parent / "configs" / "bologna_linear.toml")]) == 0
