import numpy as np
import pytest

from stann import backtest as bt
from stann.errors import UndefinedMetricError

from oracles import drawdown as oracle_drawdown, sharpe as oracle_sharpe


# -- strategies ----------------------------------------------------------------------


def test_single_positive_trend_takes_everything():
    s = bt.simple_strategy(np.array([[11.0, 9.0, 8.0]]), np.array([10.0, 10.0, 10.0]))
    np.testing.assert_array_equal(s.target_weights, [1.0, 0.0, 0.0])


def test_all_negative_trends_hold_cash():
    s = bt.simple_strategy(np.array([9.0, 8.0]), np.array([10.0, 10.0]))
    np.testing.assert_array_equal(s.target_weights, [0.0, 0.0])


def test_equal_positive_trends_split():
    s = bt.simple_strategy(np.array([11.0, 22.0]), np.array([10.0, 20.0]))
    np.testing.assert_allclose(s.target_weights, [0.5, 0.5])


def test_softmax_over_positive_trends():
    s = bt.simple_strategy(np.array([12.0, 11.0, 5.0]), np.array([10.0, 10.0, 10.0]))
    e = np.exp([0.2, 0.1])
    np.testing.assert_allclose(s.target_weights, [e[0] / e.sum(), e[1] / e.sum(), 0.0])


def test_zero_last_price():
    from stann.errors import DataError

    with pytest.raises(DataError):
        bt.simple_strategy(np.array([1.0]), np.array([0.0]))


def test_equal_weight():
    np.testing.assert_array_equal(bt.equal_weight(4).target_weights, [0.25] * 4)
    with pytest.raises(ValueError):
        bt.equal_weight(0)


# -- rebalancing --------------------------------------------------------------------------


def test_floor_arithmetic():
    p = bt.Portfolio.start(10_000, 1)
    bt.rebalance(p, bt.StrategySignal(np.array([1.0])), np.array([300.0]))
    assert p.shares[0] == 33 and p.cash == 100.0


def test_rebalance_conserves_equity():
    rng = np.random.default_rng(0)
    p = bt.Portfolio.start(10_000, 3)
    for _ in range(20):
        prices = rng.uniform(5, 500, 3)
        before = p.value(prices)
        w = rng.dirichlet(np.ones(4))[:3]
        bt.rebalance(p, bt.StrategySignal(w), prices)
        assert abs(p.value(prices) - before) <= 1e-9 * before
        assert p.cash >= 0 and np.all(p.shares >= 0)


def test_negative_prices_rejected():
    from stann.errors import DataError

    with pytest.raises(DataError):
        bt.rebalance(bt.Portfolio.start(100, 1), bt.equal_weight(1), np.array([-1.0]))


def test_cash_signal_ignores_price_moves():
    prices = np.array([[10.0, 20.0], [30.0, 5.0], [1.0, 90.0]])
    fc = [np.array([1.0, 1.0]), np.array([1.0, 1.0])]
    p, summ = bt.run_backtest(prices, fc, "simple", rf=0.0)
    assert p.equity_curve == [10_000.0] * 3


def test_constant_prices_only_accrue_cash():
    prices = np.array([[30.0, 70.0], [30.0, 70.0], [30.0, 70.0]])
    p, _ = bt.run_backtest(prices, None, "equal", rf=0.01)
    assert p.cash_curve[1] > 0
    gain = p.equity_curve[2] - p.equity_curve[1]
    assert gain == pytest.approx(p.cash_curve[2] - p.cash_curve[2] / 1.01, rel=1e-12)


def test_constant_prices_zero_profit():
    prices = np.full((6, 3), 37.0)
    for strategy in ("simple", "equal"):
        fc = [np.full(3, 40.0)] * 5
        p, summ = bt.run_backtest(prices, fc, strategy, rf=0.0)
        assert summ["total_profit_pct"] == 0.0
        assert len(p.equity_curve) == 6


def test_accounting_identity_on_random_runs():
    rng = np.random.default_rng(1)
    for _ in range(20):
        K, n = int(rng.integers(2, 12)), int(rng.integers(1, 5))
        prices = 100 * np.exp(np.cumsum(rng.normal(0, 0.05, (K + 1, n)), axis=0))
        fc = [prices[k] * rng.uniform(0.9, 1.1, n) for k in range(K)]
        p, _ = bt.run_backtest(prices, fc, "simple", rf=0.001)
        held = []
        # replay the book from the trade log to check cash + holdings = equity
        shares = np.zeros(n, dtype=np.int64)
        by_date: dict = {}
        for d, i, delta, _ in p.trade_log:
            by_date.setdefault(d, []).append((i, delta))
        for k in range(K + 1):
            eq = p.equity_curve[k]
            if k > 0:
                val = p.cash_curve[k] + float(np.dot(shares, prices[k]))
                assert abs(val - eq) <= 1e-9 * eq
            for i, delta in by_date.get(k, []):
                shares[i] += delta
            held.append(shares.copy())
        np.testing.assert_array_equal(held[-1], p.shares)


def test_dominant_asset_oracle():
    from stann.data import dominant_asset

    frame = dominant_asset(n=4, T=400, seed=3)
    idx = list(range(0, 400, 21))
    prices = frame.values[idx]
    perfect = [prices[k + 1] for k in range(len(idx) - 1)]
    _, simple = bt.run_backtest(prices, perfect, "simple")
    _, equal = bt.run_backtest(prices, perfect, "equal")
    assert simple["total_profit_pct"] >= equal["total_profit_pct"]


def test_misaligned_forecasts():
    from stann.errors import DataError

    with pytest.raises(DataError):
        bt.run_backtest(np.ones((4, 2)), [np.ones(2)], "simple")
    with pytest.raises(DataError):
        bt.run_backtest(np.ones((3, 2)), [np.ones(2)] * 2, "simple", dates=[1, 2])


# -- summary statistics ---------------------------------------------------------------------


def test_sharpe_zero_variance_is_undefined():
    with pytest.raises(UndefinedMetricError):
        bt.sharpe([0.01, 0.01, 0.01])


def test_sharpe_alternating_is_zero():
    assert bt.sharpe([0.01, -0.01, 0.01, -0.01]) == 0.0


def test_sharpe_and_drawdown_match_oracles():
    rng = np.random.default_rng(2)
    for _ in range(100):
        r = list(rng.normal(0.01, 0.05, int(rng.integers(2, 30))))
        rf = float(rng.uniform(0, 0.002))
        assert abs(bt.sharpe(r, rf, tau=21) - oracle_sharpe(r, rf, 252 / 21)) < 1e-12
        assert abs(bt.sharpe(r, rf, tau=21, annualization="paper") - oracle_sharpe(r, rf, 21 / 252)) < 1e-12
        eq = list(10_000 * np.cumprod(1 + rng.normal(0, 0.05, int(rng.integers(1, 40)))))
        assert abs(bt.max_drawdown(eq) - oracle_drawdown(eq)) < 1e-12


def test_drawdown_examples():
    assert bt.max_drawdown([1, 2, 3, 4]) == 0.0
    assert bt.max_drawdown([100, 50, 75]) == -0.5


def test_summary_examples():
    flat = bt.summary([100.0, 100.0, 100.0])
    assert flat == {"sharpe": None, "max_drawdown": 0.0, "mean_return_per_period": 0.0, "total_profit_pct": 0.0}
    assert bt.summary([100.0, 200.0])["total_profit_pct"] == 100.0


def test_summary_recomputable_from_equity_csv(tmp_path):
    rng = np.random.default_rng(4)
    prices = 100 * np.exp(np.cumsum(rng.normal(0, 0.05, (9, 3)), axis=0))
    p, summ = bt.run_backtest(prices, None, "equal", rf=0.0)
    dates = [f"2020-01-{d:02d}" for d in range(1, 10)]
    bt.write_equity_csv(tmp_path / "eq.csv", p, dates)
    bt.write_trades_csv(tmp_path / "tr.csv", p, ["A", "B", "C"])
    rows = (tmp_path / "eq.csv").read_text().splitlines()
    assert rows[0] == "date,equity,cash"
    eq = [float(r.split(",")[1]) for r in rows[1:]]
    r = [eq[i + 1] / eq[i] - 1 for i in range(len(eq) - 1)]
    assert summ["sharpe"] == pytest.approx(oracle_sharpe(r, 0.0, 12), abs=1e-12)
    assert summ["max_drawdown"] == pytest.approx(oracle_drawdown(eq), abs=1e-12)
    assert summ["total_profit_pct"] == pytest.approx(100 * (eq[-1] / eq[0] - 1), abs=1e-9)
    bt.write_summary_json(tmp_path / "s.json", summ, {"strategy": "equal"})
    import json

    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["config"] == {"strategy": "equal"} and "sharpe" in doc
