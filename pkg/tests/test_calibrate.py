import pytest
from hypothesis import given, settings, strategies as st

from fmo_petasim.calibrate import (
    PHASES,
    TimingRecord,
    evaluate,
    fit,
    fit_nd,
    parse_records,
    read_records,
    residual_report,
    synthetic_records,
    write_records,
)
from fmo_petasim.costmodel import PUBLISHED_PARAMS, CostParameters, shape_from_nf
from fmo_petasim.errors import IdentifiabilityError, ParseError, ValidationError
from fmo_petasim.fragments import WorkloadShape

TRUTH = CostParameters(1.0, 0.002, 3.0, 0.004, 0.1)
SHAPES = [WorkloadShape(n, 17, int(7.5 * n), n * (n - 1) // 2 - int(7.5 * n))
          for n in (106, 561, 1122, 2244)]


def close(a: CostParameters, b: CostParameters, rel: float):
    return all(x == pytest.approx(y, rel=rel) for x, y in zip(a.as_vector(), b.as_vector()))


def test_synthetic_round_trip():
    records = synthetic_records(TRUTH, {"ref": (1, 1.0), "slow": (8, 0.25)}, SHAPES)
    result = fit(records, "ref")
    assert close(result.params, TRUTH, 1e-8)
    assert result.efficiencies["ref"] == 1.0
    assert result.efficiencies["slow"] == pytest.approx(0.25, rel=1e-8)
    assert max(abs(r[ph]) for r in result.residuals for ph in PHASES) < 1e-8


@settings(max_examples=50, deadline=None)
@given(
    theta=st.tuples(*(st.floats(1e-3, 10.0) for _ in range(5))),
    e2=st.floats(0.01, 50.0),
    k2=st.integers(1, 64),
    nfs=st.lists(st.integers(20, 3000), min_size=2, max_size=5, unique=True),
)
def test_round_trip_property(theta, e2, k2, nfs):
    truth = CostParameters(theta[0], theta[1] * 1e-3, theta[2], theta[3] * 1e-3, theta[4] * 0.1)
    shapes = [shape_from_nf(n, 17) for n in nfs]
    records = synthetic_records(truth, {"a": (1, 1.0), "b": (k2, e2)}, shapes)
    result = fit(records, "a")
    assert close(result.params, truth, 1e-8)
    assert result.efficiencies["b"] == pytest.approx(e2, rel=1e-8)


def test_gauge_fixed_by_reference():
    # scaling every parameter and every efficiency by one factor leaves all times unchanged
    c = 3.7
    scaled = CostParameters(*(x * c for x in TRUTH.as_vector()))
    plain = synthetic_records(TRUTH, {"ref": (1, 1.0), "b": (4, 0.5)}, SHAPES)
    gauged = synthetic_records(scaled, {"ref": (1, c), "b": (4, 0.5 * c)}, SHAPES)
    for p, g in zip(plain, gauged):
        assert g.t_total == pytest.approx(p.t_total, rel=1e-13)
    a, b = fit(plain, "ref"), fit(gauged, "ref")
    assert close(a.params, b.params, 1e-8)
    assert a.efficiencies["b"] == pytest.approx(b.efficiencies["b"], rel=1e-8)


def test_monotone_history(published_records):
    result = fit(published_records, "ibm")
    h = result.history
    assert all(y <= x * (1 + 1e-12) for x, y in zip(h, h[1:]))
    assert result.objective >= 0
    assert result.efficiencies["ibm"] == 1.0


def test_published_fit_close_to_reference(published_records):
    result = fit(published_records, "ibm")
    assert close(result.params, PUBLISHED_PARAMS, 0.20)
    assert result.efficiencies["xeon"] == pytest.approx(0.071, rel=0.20)
    assert result.params.nd_slope == pytest.approx(7.5, abs=0.05)


def test_single_shape_not_identifiable():
    records = synthetic_records(TRUTH, {"ref": (1, 1.0)}, SHAPES[:1])
    with pytest.raises(IdentifiabilityError):
        fit(records, "ref")


def test_unknown_reference(ibm_records):
    with pytest.raises(ValidationError):
        fit(ibm_records, "nope")


def test_fit_nd_examples(ibm_records):
    assert fit_nd(ibm_records) == pytest.approx(7.50, abs=0.05)
    shapes = [WorkloadShape(n, 1, 3 * n, 0) for n in (10, 20, 35)]
    assert fit_nd(shapes) == 3.0
    assert fit_nd([WorkloadShape(1122, 17, 8416, 620465)]) == pytest.approx(8416 / 1122, rel=1e-15)
    assert round(8416 / 1122, 3) == 7.501
    with pytest.raises(ValidationError):
        fit_nd([WorkloadShape(0, 17, 0, 0)])


def test_residual_report_published_params(published_records):
    result = evaluate(PUBLISHED_PARAMS, {"ibm": 1.0, "xeon": 0.071}, published_records)
    report = residual_report(result, published_records)
    ibm = [r for r in report if r["machine_id"] == "ibm"]
    assert max(abs(r[f"{ph}_rel_err"]) for r in ibm for ph in PHASES) <= 0.20
    assert max(abs(r["total_rel_err"]) for r in ibm) <= 0.10
    first = ibm[0]
    assert first["monomer_avg_per_loop"] == pytest.approx(1356 / (106 * 17))
    assert first["monomer_avg_per_fragment"] == pytest.approx(1356 / 106)
    assert residual_report(result, []) == []


def test_residual_report_perfect_fit():
    records = synthetic_records(TRUTH, {"ref": (1, 1.0)}, SHAPES)
    report = residual_report(evaluate(TRUTH, {"ref": 1.0}, records), records)
    assert all(abs(r[f"{ph}_rel_err"]) < 1e-8 for r in report for ph in PHASES)


def test_record_validation():
    shape = SHAPES[0]
    with pytest.raises(ValidationError):
        TimingRecord("m", 1, shape, 0.0, 1.0, 1.0, 3.0)
    with pytest.raises(ValidationError):
        TimingRecord("m", 1, shape, 2.0, 1.0, 1.0, 1.5)
    with pytest.raises(ValidationError):
        TimingRecord("m", 0, shape, 1.0, 1.0, 1.0, 3.0)


def test_csv_round_trip(tmp_path, published_records):
    path = tmp_path / "t.csv"
    write_records(published_records, path)
    assert read_records(path) == published_records


HEADER = "machine_id,k,n_f,i_m,n_d,n_es,t_monomer,t_scf_dimer,t_es_dimer,t_total\n"


@pytest.mark.parametrize("text, line", [
    ("wrong,header\n", 1),
    (HEADER + "ibm,1,106,17,690,4875,1356,2037,398,3799\nibm,1,561\n", 3),
    ("# note\n" + HEADER + "ibm,1,x,17,690,4875,1356,2037,398,3799\n", 3),
    (HEADER + "ibm,1,106,17,690,4875,1356,2037,398,-1\n", 2),
    ("", 1),
])
def test_csv_errors_carry_line(text, line):
    with pytest.raises(ParseError) as info:
        parse_records(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_bundled_dataset_matches_fixture(published_records):
    from fmo_petasim.presets import load_dataset
    assert load_dataset("paper-tables") == published_records
