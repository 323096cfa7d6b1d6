import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stann import metrics
from stann.errors import UndefinedMetricError
from stann.metrics import EvalFrame

from oracles import mase as oracle_mase, mda as oracle_mda, scale as oracle_scale, theil as oracle_theil


def random_instance(rng):
    n_in = int(rng.integers(3, 30))
    tau = int(rng.integers(1, 25))
    ins = list(100 + np.cumsum(rng.normal(size=n_in)))
    act = list(ins[-1] + np.cumsum(rng.normal(size=tau)))
    fc = list(ins[-1] + np.cumsum(rng.normal(size=tau)))
    return ins, act, fc


def test_mase_hand_case():
    assert metrics.mase(EvalFrame([1, 2, 3, 4], [5, 6], [4, 4])) == 1.5


def test_perfect_forecast():
    f = EvalFrame([1, 3, 2, 5], [4, 6], [4, 6])
    assert metrics.mase(f) == 0.0
    assert metrics.theil_u(f) == 0.0
    np.testing.assert_array_equal(metrics.ipf(f), [0.0, 0.0])


def test_naive_scores():
    f = EvalFrame([1, 3, 2, 5], [6, 7, 8], [5, 5, 5])
    assert metrics.theil_u(f) == 1.0
    assert metrics.mda(f, 5) == 0.0


def test_mda_enumerated_case():
    f = EvalFrame([1, 2, 3], [4, 2, 5], [4, 4, 4])
    assert metrics.mda(f, 3) == pytest.approx(2 / 3, abs=1e-15)


def test_undefined_denominators():
    with pytest.raises(UndefinedMetricError):
        metrics.mase(EvalFrame([2, 2, 2], [3], [3]))
    with pytest.raises(UndefinedMetricError):
        metrics.theil_u(EvalFrame([1, 2], [2, 2], [3, 3]))


def test_frame_validation():
    with pytest.raises(ValueError):
        EvalFrame([1, 2], [1, 2], [1])
    with pytest.raises(ValueError):
        EvalFrame([1], [1], [1])


def test_metrics_match_brute_force_oracles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        ins, act, fc = random_instance(rng)
        f = EvalFrame(ins, act, fc)
        assert abs(metrics.mase(f) - oracle_mase(ins, act, fc)) < 1e-12
        assert abs(metrics.theil_u(f) - oracle_theil(ins, act, fc)) < 1e-12
        assert abs(metrics.mda(f, ins[-1]) - oracle_mda(ins, act, fc)) < 1e-12
        d = oracle_scale(ins)
        np.testing.assert_allclose(metrics.ipf(f), [abs(a - b) / d for a, b in zip(act, fc)], rtol=0, atol=1e-12)
        assert metrics.mase(f) == np.mean(metrics.ipf(f))


@pytest.mark.parametrize("c", [0.01, 1.0, 1000.0])
def test_scale_invariance(c):
    rng = np.random.default_rng(1)
    for _ in range(20):
        ins, act, fc = random_instance(rng)
        a = EvalFrame(ins, act, fc)
        b = EvalFrame(np.multiply(ins, c), np.multiply(act, c), np.multiply(fc, c))
        assert metrics.mase(b) == pytest.approx(metrics.mase(a), rel=1e-12)
        assert metrics.theil_u(b) == pytest.approx(metrics.theil_u(a), rel=1e-12)
        assert metrics.mda(b) == metrics.mda(a)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=20),
    st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10),
)
def test_mda_in_unit_interval(ins, act):
    fc = list(reversed(act))
    f = EvalFrame(ins, act, fc)
    assert 0.0 <= metrics.mda(f) <= 1.0


def _rows(values):
    return [{"origin": o, "series": s, "mase": v, "theil_u": v * 2, "mda": 0.5} for (o, s), v in values.items()]


def test_naive_relative_report_is_exactly_one():
    rng = np.random.default_rng(2)
    naive = _rows({(o, s): float(rng.uniform(0.5, 2)) for o in range(4) for s in range(3)})
    rep = metrics.relative_report({"naive": naive}, dataset="x")
    assert rep["naive"]["mase_mean"] == 1.0 and rep["naive"]["mase_std"] == 0.0
    assert rep["naive"]["theil_mean"] == 1.0 and rep["naive"]["theil_std"] == 0.0


def test_relative_report_matches_independent_aggregation():
    rng = np.random.default_rng(3)
    keys = [(o, s) for o in range(5) for s in range(3)]
    naive = _rows({k: float(rng.uniform(0.5, 2)) for k in keys})
    model = _rows({k: float(rng.uniform(0.5, 2)) for k in keys})
    rep = metrics.relative_report({"naive": naive, "m": model})["m"]
    per_origin = []
    for o in range(5):
        ratios = [m["mase"] / n["mase"] for m, n in zip(model, naive) if m["origin"] == o]
        per_origin.append(sum(ratios) / len(ratios))
    mean = sum(per_origin) / 5
    std = math.sqrt(sum((v - mean) ** 2 for v in per_origin) / 5)
    assert rep["mase_mean"] == pytest.approx(mean, abs=1e-12)
    assert rep["mase_std"] == pytest.approx(std, abs=1e-12)
    assert rep["origins"] == 5
    series = metrics.relative_report({"naive": naive, "m": model}, granularity="series")["m"]
    assert series["mase_mean"] == pytest.approx(np.mean([m["mase"] / n["mase"] for m, n in zip(model, naive)]), abs=1e-12)


def test_relative_report_needs_naive():
    with pytest.raises(KeyError):
        metrics.relative_report({"m": _rows({(0, 0): 1.0})})


def test_writers(tmp_path):
    rows = _rows({(0, 0): 0.5})
    metrics.write_cv_report(tmp_path / "cv.csv", rows)
    assert (tmp_path / "cv.csv").read_text().splitlines() == ["origin,series,mase,theil_u,mda", "0,0,0.5,1,0.5"]
    metrics.write_ipf_csv(tmp_path / "ipf.csv", [(7, 1, [0.25, 0.5])])
    assert (tmp_path / "ipf.csv").read_text().splitlines()[1:] == ["7,1,1,0.25", "7,1,2,0.5"]
    rep = metrics.relative_report({"naive": rows})
    metrics.write_metrics_json(tmp_path / "m.json", rep["naive"])
    import json

    doc = json.loads((tmp_path / "m.json").read_text())
    assert set(doc) == {"model", "dataset", "origins", "mase_mean", "mase_std", "theil_mean", "theil_std", "mda_mean", "mda_std"}
