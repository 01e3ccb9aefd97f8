import json
from pathlib import Path

import pytest

from strataopt import ColumnMapping, load_constraints, load_frame

FIXTURES = Path(__file__).parent / "fixtures"
METALS = ["cadmium", "copper", "lead", "zinc"]

# pass/fail lines collected by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def meuse_frame(metals=("lead",)):
    cols = ColumnMapping(
        id="id",
        x=[f"{m}.pred" for m in metals],
        y=[f"{m}.pred" for m in metals],
        var=[f"{m}.var" for m in metals],
        lon="lon",
        lat="lat",
        domainvalue="dom",
    )
    return load_frame(FIXTURES / "meuse_grid_preds.csv", cols)


def meuse_ranges(metals=("lead",)):
    vg = json.loads((FIXTURES / "meuse_variograms.json").read_text())
    return [vg[m]["range"] for m in metals]


def bologna_frame():
    cols = ColumnMapping(id="id", x=["X1"], y=["Y1"], domainvalue="domainvalue", lon="lon", lat="lat", extra=["ST1", "P1"])
    return load_frame(FIXTURES / "bologna_frame.csv", cols)


@pytest.fixture(scope="session")
def meuse_lead():
    return meuse_frame(), load_constraints(FIXTURES / "meuse_cv_uni.csv")


@pytest.fixture(scope="session")
def meuse_multi():
    return meuse_frame(METALS), load_constraints(FIXTURES / "meuse_cv_multi.csv")


@pytest.fixture(scope="session")
def bologna():
    return bologna_frame(), load_constraints(FIXTURES / "bologna_cv.csv")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
