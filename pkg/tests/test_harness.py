import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from entot import ComparisonSeries, RunRecord, _kernels, competitive_ratio, emit_outputs, metric_d, run_benchmark
from entot.core import DomainError
from entot.harness import (
    RATIO_COLUMNS,
    RecordWriter,
    compare_records,
    comparisons,
    parse_records_json,
    ratios_csv,
    records_csv,
    records_json,
    validate_config,
)
from entot.instances import uniform_instance
from entot.harness import run_cell

from .golden.make_golden import CONFIG as GOLDEN_CONFIG, write_golden

GOLDEN = Path(__file__).parent / "golden"


def test_metric_d_examples():
    assert metric_d(np.diag([0.5, 0.5]), [0.5, 0.5], [0.5, 0.5]) == 0.0
    assert metric_d(np.full((2, 2), 0.25), [0.7, 0.3], [0.5, 0.5]) == pytest.approx(0.4, abs=1e-15)
    assert metric_d(np.zeros((3, 3)), np.full(3, 1 / 3), np.full(3, 1 / 3)) == pytest.approx(2.0)
    with pytest.raises(DomainError):
        metric_d(np.zeros((2, 3)), [0.5, 0.5], [0.5, 0.5])


def test_competitive_ratio_examples():
    assert competitive_ratio(0.3, 0.3) == 0.0
    assert competitive_ratio(1.0, 0.1) == pytest.approx(math.log(10))
    assert abs(math.log(10) - 2.302585) < 1e-6
    for bad in [(0.0, 1.0), (1.0, -1.0), (float("nan"), 1.0)]:
        with pytest.raises(DomainError):
            competitive_ratio(*bad)


@given(st.floats(1e-300, 1e300), st.floats(1e-300, 1e300))
def test_competitive_ratio_antisymmetric(a, b):
    assert competitive_ratio(a, b) == -competitive_ratio(b, a)


def make_series(d_a, d_b, seeds=None):
    d_a, d_b = np.atleast_2d(d_a).astype(float), np.atleast_2d(d_b).astype(float)
    seeds = seeds or list(range(d_a.shape[0]))
    return ComparisonSeries("a", "b", np.arange(d_a.shape[1]), seeds, d_a, d_b)


def test_ratio_summary_constant_e():
    d_b = np.array([[1.0, 0.5, 0.1], [2.0, 0.3, 0.01]])
    st_ = make_series(d_b * math.e, d_b).stats()
    for key in ("min", "median", "max"):
        np.testing.assert_allclose(st_[key], 1.0, rtol=1e-15)


def test_ratio_stats_skip_nonpositive_and_floor():
    s = make_series([[1.0, 0.0, 1e-14], [1.0, 1.0, 1.0]], [[0.5, 1.0, 1.0], [2.0, 1.0, 1.0]])
    rat = s.ratios()
    assert np.isnan(rat[0, 1])
    st_ = s.stats()
    np.testing.assert_array_equal(st_["seeds"], [2, 1, 2])
    st_ = s.stats(floor=1e-12)
    np.testing.assert_array_equal(st_["updates"], [0, 1][:1])


def test_ratio_stats_permutation_invariant():
    rng = np.random.default_rng(0)
    a, b = rng.random((6, 5)), rng.random((6, 5))
    p = rng.permutation(6)
    s1, s2 = make_series(a, b).stats(), make_series(a[p], b[p]).stats()
    for key in ("min", "median", "max"):
        np.testing.assert_array_equal(s1[key], s2[key])


def test_bench_uniform_example():
    recs = run_benchmark({"instances": [{"kind": "uniform", "n": 4}], "methods": ["greenkhorn"],
                          "eps_grid": [0.5], "seeds": [1]})
    assert len(recs) == 1
    r = recs[0]
    assert r.d == 0.0 and r.cost == 1.0 and r.status == "converged"
    assert r.seed == 1 and r.rng == "numpy.PCG64"


def test_bench_cross_product_count_and_sink():
    seen = []
    cfg = {"instances": [{"kind": "synthetic", "side": 3, "fg_fraction": 0.5}],
           "methods": ["sinkhorn", "greenkhorn"], "eps_grid": [1.0], "seeds": list(range(10))}
    recs = run_benchmark(cfg, sink=seen.append)
    assert len(recs) == 20 == len(seen)
    assert all(r.d <= 1e-9 for r in recs)
    again = run_benchmark(cfg)
    assert [r.to_dict() | {"wall_seconds": 0} for r in recs] == [r.to_dict() | {"wall_seconds": 0} for r in again]


def test_bench_eta_grid_and_oracle():
    cfg = {"instances": [{"kind": "synthetic", "side": 3, "fg_fraction": 0.5}], "methods": ["sinkhorn", "apdamd"],
           "eta_grid": [1.0, 5.0], "seeds": [3], "oracle": True, "budgets": {"tol": 1e-6}}
    recs = run_benchmark(cfg)
    assert [(r.eta, r.method) for r in recs] == [(1.0, "sinkhorn"), (1.0, "apdamd"), (5.0, "sinkhorn"), (5.0, "apdamd")]
    for r in recs:
        assert r.eps is None and r.eps_prime is None
        assert r.cost >= r.oracle_value - 1e-9
        assert r.d_unrounded <= 1e-6 and r.d <= 1e-9


def test_cell_failure_is_recorded_not_raised():
    spec = uniform_instance(3)
    rec = run_cell(spec, "newton", eps=0.5)
    assert rec.status == "error" and "newton" in rec.error
    # budget exhaustion is a status, not an error
    from entot import synthetic_instance

    rec = run_cell(synthetic_instance(0, 4, 0.1), "greenkhorn", eps=0.01, budgets={"max_iter": 3})
    assert rec.status == "max_iterations" and rec.d <= 1e-9


def test_validate_config():
    good = {"instances": [{"kind": "uniform", "n": 3}], "methods": ["sinkhorn"], "eps_grid": [1.0]}
    assert validate_config(good) is good
    for bad in [dict(good, methods=[]), dict(good, eta_grid=[1.0]), {k: v for k, v in good.items() if k != "eps_grid"},
                dict(good, eps_grid=[-1.0]), dict(good, methods=["foo"]), []]:
        with pytest.raises(DomainError):
            validate_config(bad)


def test_csv_single_record_header_and_order():
    rec = run_benchmark({"instances": [{"kind": "uniform", "n": 2}], "methods": ["sinkhorn"],
                         "eps_grid": [1.0], "seeds": [0]})
    text = records_csv(rec)
    lines = text.splitlines()
    assert len(lines) == 2
    assert lines[0].split(",") == RunRecord.columns()
    assert lines[0] == ("kind,seed,n,fg_fraction,method,eta,eps,eps_prime,status,iterations,updates,"
                        "grad_calls,wall_seconds,d_unrounded,d,cost,oracle_value,rng,error")
    assert "wall_seconds" not in records_csv(rec, timing=False)


def test_json_roundtrip():
    cfg = dict(GOLDEN_CONFIG, oracle=False)
    recs = run_benchmark(cfg)
    recs.append(run_cell(uniform_instance(3), "newton", eps=0.5))
    back = parse_records_json(records_json(recs))
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        da, db = a.to_dict(), b.to_dict()
        assert da.keys() == db.keys()
        for k in da:
            if isinstance(da[k], float) and math.isnan(da[k]):
                assert math.isnan(db[k])
            else:
                assert da[k] == db[k], k


def test_golden_files_match(tmp_path):
    write_golden(tmp_path)
    ref = GOLDEN / _kernels.backend()
    for name in ("results.csv", "results.json", "series.csv", "ratios.csv"):
        assert (tmp_path / name).read_bytes() == (ref / name).read_bytes(), name


def test_emit_outputs_plotdata(tmp_path):
    recs = run_benchmark({"instances": [{"kind": "synthetic", "side": 3, "fg_fraction": 0.5}],
                          "methods": ["sinkhorn", "greenkhorn"], "eta_grid": [5.0], "seeds": [0, 1],
                          "budgets": {"tol": 1e-10}})
    paths = emit_outputs(recs, tmp_path / "out", "json", plotdata=True)
    assert [p.name for p in paths] == ["results.json", "series.csv", "ratios.csv"]
    header = (tmp_path / "out" / "ratios.csv").read_text().splitlines()[0]
    assert header.split(",") == list(RATIO_COLUMNS)
    series = (tmp_path / "out" / "series.csv").read_text().splitlines()
    assert series[0] == "kind,seed,n,grid,grid_value,algorithm,iteration,updates,d"
    with pytest.raises(DomainError):
        emit_outputs([], tmp_path)
    with pytest.raises(DomainError):
        emit_outputs(recs, tmp_path, "xml")


def test_emit_outputs_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    recs = run_benchmark({"instances": [{"kind": "uniform", "n": 2}], "methods": ["sinkhorn"],
                          "eps_grid": [1.0], "seeds": [0]})
    with pytest.raises(OSError, match="file"):
        emit_outputs(recs, blocker / "sub")


def test_comparison_alignment_matches_update_axis():
    recs = run_benchmark({"instances": [{"kind": "synthetic", "side": 3, "fg_fraction": 0.5}],
                          "methods": ["sinkhorn", "greenkhorn"], "eta_grid": [5.0], "seeds": [0, 1, 2],
                          "budgets": {"tol": 1e-10}})
    (key, comp), = comparisons(recs, [("sinkhorn", "greenkhorn")])
    assert key["pair"] == "sinkhorn/greenkhorn"
    n = 9
    assert np.all(comp.updates % n == 0)
    sk = [r for r in recs if r.method == "sinkhorn"]
    gk = [r for r in recs if r.method == "greenkhorn"]
    direct = compare_records(sk, gk)
    np.testing.assert_array_equal(direct.d_a, comp.d_a)
    # greenkhorn d at k*n updates is its residual after k*n single steps
    g0 = dict(gk[0].series)
    for j, u in enumerate(comp.updates):
        if u in g0:
            assert comp.d_b[0, j] == g0[u]
    assert "sinkhorn/greenkhorn" in ratios_csv([(key, comp)])


def test_record_writer_streams(tmp_path):
    path = tmp_path / "log" / "records.jsonl"
    with RecordWriter(path) as sink:
        run_benchmark({"instances": [{"kind": "uniform", "n": 2}], "methods": ["sinkhorn", "apdamd"],
                       "eps_grid": [1.0], "seeds": [0]}, sink=sink)
        assert len(path.read_text().splitlines()) == 2
    docs = [json.loads(line) for line in path.read_text().splitlines()]
    assert [d["method"] for d in docs] == ["sinkhorn", "apdamd"]
