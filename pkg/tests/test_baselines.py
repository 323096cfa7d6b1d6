import numpy as np
import pytest

from stann import baselines as bl
from stann import metrics
from stann.errors import DataError


def test_naive_is_constant_at_last_value():
    X = np.random.default_rng(0).normal(size=(20, 3))
    out = bl.naive_forecast(X, 7)
    assert out.shape == (7, 3)
    assert np.all(out == X[-1])


def test_naive_errors():
    with pytest.raises(DataError):
        bl.naive_forecast(np.zeros((0, 2)), 3)
    with pytest.raises(ValueError):
        bl.naive_forecast(np.ones((3, 2)), 0)


def test_naive_mda_on_monotone_series_is_zero():
    x = np.arange(1.0, 41.0)
    f = metrics.EvalFrame(x[:30], x[30:], bl.naive_forecast(x[:30, None], 10)[:, 0])
    assert metrics.mda(f) == 0.0
    assert metrics.theil_u(f) == 1.0


def test_noiseless_ar1_coefficient():
    x = 5.0 * 0.8 ** np.arange(40)
    m = bl.ar_fit(x, 1)
    # closed-form OLS oracle with intercept
    A = np.column_stack([x[:-1], np.ones(39)])
    oracle = np.linalg.lstsq(A, x[1:], rcond=None)[0]
    assert abs(m.coef[0] - 0.8) < 1e-6
    np.testing.assert_allclose(m.coef, oracle, atol=1e-8)


def test_lag_zero_is_mean_forecast():
    x = np.random.default_rng(1).normal(size=30)
    m = bl.ar_fit(x, 0)
    np.testing.assert_allclose(bl.ar_forecast(m, x, 4), np.full(4, x.mean()), atol=1e-12)


def test_constant_series_reproduced():
    x = np.full(20, 3.5)
    m = bl.ar_fit(x, 2)
    np.testing.assert_array_equal(bl.ar_forecast(m, x, 5), np.full(5, 3.5))
    assert bl.select_lag(x) == 1


def test_short_series_rejected():
    with pytest.raises(DataError):
        bl.ar_fit(np.arange(5.0), 2)
    with pytest.raises(ValueError):
        bl.ar_fit(np.arange(50.0), -1)


def test_recursive_forecast_matches_loop():
    rng = np.random.default_rng(2)
    x = np.cumsum(rng.normal(size=80))
    m = bl.ar_fit(x, 3)
    hist = list(x)
    expect = []
    for _ in range(6):
        v = m.coef[3] + m.coef[0] * hist[-1] + m.coef[1] * hist[-2] + m.coef[2] * hist[-3]
        expect.append(v)
        hist.append(v)
    np.testing.assert_allclose(bl.ar_forecast(m, x, 6), expect, atol=1e-12)


def test_select_lag_recovers_ar2():
    rng = np.random.default_rng(3)
    x = np.zeros(2000)
    e = rng.normal(size=2000)
    for t in range(2, 2000):
        x[t] = 0.5 * x[t - 1] - 0.4 * x[t - 2] + e[t]
    assert bl.select_lag(x, 8) == 2


def test_panel_forecast_shape():
    X = np.cumsum(np.random.default_rng(4).normal(size=(60, 3)), axis=0)
    assert bl.ar_forecast_panel(X, 5).shape == (5, 3)
    np.testing.assert_allclose(bl.ar_forecast_panel(X, 5, lag=1)[:, 0], bl.ar_forecast(bl.ar_fit(X[:, 0], 1), X[:, 0], 5))
