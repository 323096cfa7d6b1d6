"""Long-only, whole-share portfolio backtests driven by forecasts.

At each rebalance date the book is liquidated at the current close and
rebuilt from the target weights with ``floor(weight * equity / price)``
shares per asset; the leftover cash earns the period's risk-free rate.
Fees are zero, so liquidate-then-buy is value-equivalent to trading the
differences.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UndefinedMetricError

TRADING_DAYS = 252


@dataclass
class StrategySignal:
    target_weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.target_weights, dtype=float)
        if not np.isfinite(w).all() or (w < 0).any() or w.sum() > 1.0 + 1e-12:
            raise ValueError("target weights must be finite, non-negative and sum to at most 1")
        self.target_weights = w


@dataclass
class Portfolio:
    cash: float
    shares: np.ndarray
    equity_curve: list[float] = field(default_factory=list)
    cash_curve: list[float] = field(default_factory=list)
    trade_log: list[tuple] = field(default_factory=list)

    @classmethod
    def start(cls, initial: float, n: int) -> "Portfolio":
        return cls(cash=float(initial), shares=np.zeros(n, dtype=np.int64))

    def value(self, prices) -> float:
        return self.cash + float(np.dot(self.shares, np.asarray(prices, dtype=float)))

    def mark(self, prices) -> float:
        eq = self.value(prices)
        self.equity_curve.append(eq)
        self.cash_curve.append(self.cash)
        return eq


def simple_strategy(forecast, last_prices) -> StrategySignal:
    """Softmax over assets whose forecast ends above the last price.

    ``forecast`` is (tau, n) or the final forecast values (n,).
    """
    fc = np.asarray(forecast, dtype=float)
    end = fc[-1] if fc.ndim == 2 else fc
    last = np.asarray(last_prices, dtype=float)
    if end.shape != last.shape:
        raise ValueError("forecast and last prices are not aligned")
    if (last == 0).any():
        raise DataError("zero last price")
    trend = (end - last) / last
    w = np.zeros_like(trend)
    up = trend > 0
    if up.any():
        t = trend[up]
        e = np.exp(t - t.max())
        w[up] = e / e.sum()
    return StrategySignal(w)


def equal_weight(n: int) -> StrategySignal:
    if n < 1:
        raise ValueError("equal weight needs at least one asset")
    return StrategySignal(np.full(n, 1.0 / n))


def rebalance(p: Portfolio, s: StrategySignal, prices, date=None) -> Portfolio:
    """Liquidate and rebuild the book at ``prices``; log the net share changes."""
    prices = np.asarray(prices, dtype=float)
    if (prices <= 0).any():
        raise DataError("prices must be positive")
    equity = p.value(prices)
    new = np.floor(s.target_weights * equity / prices).astype(np.int64)
    cost = float(np.dot(new, prices))
    if cost > equity:
        # floor rounding can only undershoot; guard against fp drift
        new = np.floor(s.target_weights * equity / prices * (1 - 1e-12)).astype(np.int64)
        cost = float(np.dot(new, prices))
    for i in np.flatnonzero(new != p.shares):
        p.trade_log.append((date, int(i), int(new[i] - p.shares[i]), float(prices[i])))
    p.shares = new
    p.cash = equity - cost
    return p


def accrue(p: Portfolio, rf_rate_period: float) -> Portfolio:
    p.cash *= 1.0 + rf_rate_period
    return p


def run_backtest(
    prices,
    forecasts,
    strategy: str = "simple",
    rf=0.0,
    initial: float = 10_000.0,
    dates=None,
    tau: int = 21,
    annualization: str | float = "conventional",
):
    """Iterate signal -> rebalance -> hold over every rebalance date.

    ``prices`` has K+1 rows: closes at the K rebalance dates plus the final
    mark. ``forecasts`` has K entries (each (tau, n) or (n,)); ``rf`` is a
    per-period rate, scalar or length K. Returns ``(portfolio, summary)``.
    """
    prices = np.asarray(prices, dtype=float)
    K = prices.shape[0] - 1
    if K < 1:
        raise DataError("need at least one rebalance date and a final mark")
    if strategy == "simple" and (forecasts is None or len(forecasts) != K):
        raise DataError(f"expected {K} forecasts (one per rebalance date), got {0 if forecasts is None else len(forecasts)}")
    rf = np.broadcast_to(np.asarray(rf, dtype=float), (K,))
    dates = list(range(K + 1)) if dates is None else list(dates)
    if len(dates) != K + 1:
        raise DataError("dates and prices are misaligned")
    n = prices.shape[1]
    p = Portfolio.start(initial, n)
    p.mark(prices[0])
    for k in range(K):
        if strategy == "simple":
            sig = simple_strategy(forecasts[k], prices[k])
        elif strategy == "equal":
            sig = equal_weight(n)
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
        rebalance(p, sig, prices[k], dates[k])
        accrue(p, rf[k])
        p.mark(prices[k + 1])
    return p, summary(p.equity_curve, p.trade_log, rf=rf, tau=tau, annualization=annualization)


def period_returns(equity_curve) -> np.ndarray:
    eq = np.asarray(equity_curve, dtype=float)
    return eq[1:] / eq[:-1] - 1.0


def annualization_factor(tau: int = 21, mode: str = "conventional") -> float:
    """``252 / tau`` periods per year, or the literal ``tau / 252`` factor."""
    if mode == "conventional":
        return TRADING_DAYS / tau
    if mode == "paper":
        return tau / TRADING_DAYS
    raise ValueError(f"unknown annualization mode {mode!r}")


def sharpe(period_returns, rf_period=0.0, tau: int = 21, annualization: str | float = "conventional") -> float:
    r = np.asarray(period_returns, dtype=float)
    if r.size < 2:
        raise UndefinedMetricError("Sharpe ratio needs at least two returns")
    excess = r - np.broadcast_to(np.asarray(rf_period, dtype=float), r.shape)
    sd = float(np.std(excess, ddof=1))
    if np.all(excess == excess[0]) or sd == 0.0:
        raise UndefinedMetricError("excess returns have zero variance; Sharpe ratio undefined")
    factor = annualization if isinstance(annualization, (int, float)) else annualization_factor(tau, annualization)
    return float(np.mean(excess) / sd * math.sqrt(factor))


def max_drawdown(equity_curve) -> float:
    eq = np.asarray(equity_curve, dtype=float)
    if eq.size == 0:
        raise ValueError("empty equity curve")
    return float(np.min(eq / np.maximum.accumulate(eq) - 1.0))


def summary(equity_curve, trade_log=None, rf=0.0, tau: int = 21, annualization: str | float = "conventional") -> dict:
    r = period_returns(equity_curve)
    try:
        sr = sharpe(r, rf, tau, annualization)
    except UndefinedMetricError:
        sr = None
    return {
        "sharpe": sr,
        "max_drawdown": max_drawdown(equity_curve),
        "mean_return_per_period": float(np.mean(r)) if r.size else 0.0,
        "total_profit_pct": float(100.0 * (equity_curve[-1] / equity_curve[0] - 1.0)),
    }


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_equity_csv(path, p: Portfolio, dates) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "equity", "cash"])
        for d, eq, cash in zip(dates, p.equity_curve, p.cash_curve):
            w.writerow([d, _fmt(eq), _fmt(cash)])


def write_trades_csv(path, p: Portfolio, tickers=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "asset", "delta_shares", "price"])
        for d, i, delta, price in p.trade_log:
            w.writerow([d, tickers[i] if tickers is not None else i, delta, _fmt(price)])


def write_summary_json(path, summ: dict, config: dict) -> None:
    with open(path, "w") as fh:
        json.dump({**summ, "config": config}, fh, indent=2, sort_keys=True)
        fh.write("\n")
