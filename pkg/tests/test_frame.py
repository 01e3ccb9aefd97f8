import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from strataopt.frame import (
    ColumnMapping,
    FrameValidationError,
    ParseError,
    PrecisionConstraints,
    SamplingFrame,
    SchemaError,
    load_constraints,
    load_frame,
    validate,
    write_constraints,
    write_frame,
)

MAP = ColumnMapping(id="id", x=["X1"], y=["Y1"], domainvalue="dom", var=["V1"], lon="lon", lat="lat")


def write(path, text):
    path.write_text(text)
    return path


def test_meuse_fixture_loads(meuse_lead):
    frame, cons = meuse_lead
    assert len(frame) == 3103
    assert frame.y.shape == (3103, 1)
    assert frame.has_variances and frame.has_coordinates
    assert cons.for_domain(1).tolist() == [0.05]


def test_header_only_gives_empty_frame(tmp_path, caplog):
    p = write(tmp_path / "f.csv", "id,X1,Y1,V1,lon,lat,dom\n")
    frame = load_frame(p, MAP)
    assert len(frame) == 0
    assert "no units" in caplog.text


def test_duplicate_id_named(tmp_path):
    p = write(tmp_path / "f.csv", "id,X1,Y1,V1,lon,lat,dom\nu1,1,1,0,0,0,1\nu1,2,2,0,1,1,1\n")
    with pytest.raises(FrameValidationError, match="u1"):
        load_frame(p, MAP)


def test_missing_column_named(tmp_path):
    p = write(tmp_path / "f.csv", "id,X1,Y1,lon,lat,dom\nu1,1,1,0,0,1\n")
    with pytest.raises(SchemaError, match="V1"):
        load_frame(p, MAP)


def test_non_numeric_reports_row(tmp_path):
    p = write(tmp_path / "f.csv", "id,X1,Y1,V1,lon,lat,dom\nu1,1,1,0,0,0,1\nu2,1,abc,0,0,0,1\n")
    with pytest.raises(ParseError, match="row 2"):
        load_frame(p, MAP)


def test_negative_variance_rejected(tmp_path):
    p = write(tmp_path / "f.csv", "id,X1,Y1,V1,lon,lat,dom\nu1,1,1,-1,0,0,1\n")
    with pytest.raises(FrameValidationError):
        load_frame(p, MAP)


def test_categorical_x_kept(tmp_path):
    p = write(tmp_path / "f.csv", "id,X1,Y1,dom\na,red,1,1\nb,blue,2,1\nc,red,3,1\n")
    frame = load_frame(p, ColumnMapping(id="id", x=["X1"], y=["Y1"], domainvalue="dom"))
    assert frame.x_numeric == (False,)
    assert frame.x_codes()[:, 0].tolist() == [1, 0, 1]


def test_constraints_row(tmp_path):
    p = write(tmp_path / "c.csv", "DOM,CV1,CV2,CV3,CV4,domainvalue\nDOM1,0.05,0.05,0.05,0.05,1\n")
    c = load_constraints(p)
    assert c.for_domain(1).tolist() == [0.05] * 4


def test_constraints_range_error(tmp_path):
    p = write(tmp_path / "c.csv", "DOM,CV1,domainvalue\nDOM1,1.5,1\n")
    with pytest.raises(FrameValidationError, match="0, 1"):
        load_constraints(p)


def test_constraints_duplicate_domain(tmp_path):
    p = write(tmp_path / "c.csv", "DOM,CV1,domainvalue\nDOM1,0.1,1\nDOM1,0.2,1\n")
    with pytest.raises(FrameValidationError, match="duplicate"):
        load_constraints(p)


def test_constraints_roundtrip(tmp_path):
    c = PrecisionConstraints({1: [0.05, 0.1], 3: [0.02, 0.2]})
    write_constraints(c, tmp_path / "c.csv")
    back = load_constraints(tmp_path / "c.csv")
    assert back.domains == [1, 3]
    assert np.array_equal(back.for_domain(3), c.for_domain(3))


def small_frame(**kw):
    base = dict(ids=["a", "b", "c"], x=[1.0, 2.0, 3.0], y=[1.0, 2.0, 3.0], domain=[1, 1, 2], x_names=["X1"], y_names=["Y1"])
    base.update(kw)
    return SamplingFrame(**base)


def test_validate_spatial_needs_coordinates():
    rep = validate(small_frame(var=[0.0, 0.0, 0.0]), PrecisionConstraints.uniform([0.1], (1, 2)), "spatial")
    assert not rep.ok
    assert any("coordinates required" in e for e in rep.errors)


def test_validate_spatial_needs_variances():
    rep = validate(small_frame(lon=[0, 1, 2], lat=[0, 0, 0]), PrecisionConstraints.uniform([0.1], (1, 2)), "spatial")
    assert any("variances required" in e for e in rep.errors)


def test_validate_atomic_categorical_ok():
    f = small_frame(x=np.array(["a", "b", "a"], dtype=object))
    rep = validate(f, PrecisionConstraints.uniform([0.1], (1, 2)), "atomic")
    assert rep.ok, rep.errors


def test_validate_continuous_rejects_categorical():
    f = small_frame(x=np.array(["a", "b", "a"], dtype=object))
    rep = validate(f, PrecisionConstraints.uniform([0.1], (1, 2)), "continuous")
    assert not rep.ok


def test_validate_missing_domain_listed():
    rep = validate(small_frame(), PrecisionConstraints.uniform([0.1], (1,)), "continuous")
    assert any("2" in e and "domain" in e for e in rep.errors)


def test_validate_q_mismatch():
    rep = validate(small_frame(), PrecisionConstraints.uniform([0.1, 0.1], (1, 2)), "continuous")
    assert not rep.ok


def test_nonpositive_domain_rejected():
    with pytest.raises(FrameValidationError):
        small_frame(domain=[0, 1, 1])


def test_unit_record_and_subset():
    f = small_frame(weight=[1.0, 2.0, 3.0])
    u = f.unit(1)
    assert u.id == "b" and u.weight == 2.0 and u.domainvalue == 1
    s = f.subset([2, 0])
    assert s.ids.tolist() == ["c", "a"]


finite = st.floats(min_value=-1e12, max_value=1e12, allow_nan=False, allow_infinity=False)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(finite, finite, st.floats(0, 1e6), finite, finite, st.integers(1, 4)), min_size=1, max_size=20))
def test_write_load_roundtrip_bit_exact(tmp_path_factory, rows):
    arr = np.array(rows, dtype=float)
    f = SamplingFrame(
        ids=[f"u{i}" for i in range(len(rows))],
        x=arr[:, 0], y=arr[:, 1], var=arr[:, 2], lon=arr[:, 3], lat=arr[:, 4],
        domain=arr[:, 5].astype(int), x_names=["a"], y_names=["b"],
    )
    p = tmp_path_factory.mktemp("rt") / "f.csv"
    mapping = write_frame(f, p)
    g = load_frame(p, mapping)
    assert g.ids.tolist() == f.ids.tolist()
    for name in ("x", "y", "var", "lon", "lat", "weight"):
        assert np.array_equal(getattr(g, name).astype(float), getattr(f, name).astype(float)), name
    assert np.array_equal(g.domain, f.domain)
