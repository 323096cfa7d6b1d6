"""Naive persistence and per-series least-squares AR baselines."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

RIDGE = 1e-8


def naive_forecast(X, tau: int) -> np.ndarray:
    """Repeat the last observation ``tau`` times."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise DataError("naive forecast of an empty series")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return np.repeat(X[-1:], tau, axis=0)


@dataclass
class ArModel:
    lag: int
    coef: np.ndarray  # [a_1 .. a_l, intercept]

    @property
    def intercept(self) -> float:
        return float(self.coef[-1])


def _design(x: np.ndarray, lag: int, start: int | None = None):
    start = lag if start is None else start
    rows = [x[start - k : len(x) - k] for k in range(1, lag + 1)]
    rows.append(np.ones(len(x) - start))
    return np.column_stack(rows), x[start:]


def _solve(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    G = A.T @ A
    if np.linalg.cond(G) > 1e12:
        warnings.warn("singular normal equations in AR fit; using ridge fallback", RuntimeWarning)
        G = G + RIDGE * np.eye(G.shape[0])
    return np.linalg.solve(G, A.T @ y)


def ar_fit(x, lag: int) -> ArModel:
    """OLS fit of ``x_t`` on ``[x_{t-1}, .., x_{t-lag}, 1]``."""
    x = np.asarray(x, dtype=float)
    if lag < 0:
        raise ValueError("lag must be >= 0")
    if len(x) <= 2 * lag + 1:
        raise DataError(f"AR({lag}) needs more than {2 * lag + 1} points, got {len(x)}")
    if np.all(x == x[0]):
        coef = np.zeros(lag + 1)
        coef[-1] = x[0]
        return ArModel(lag, coef)
    A, y = _design(x, lag)
    return ArModel(lag, _solve(A, y))


def ar_forecast(model: ArModel, history, tau: int) -> np.ndarray:
    hist = list(np.asarray(history, dtype=float)[-model.lag :]) if model.lag else []
    if len(hist) < model.lag:
        raise DataError("history shorter than the AR lag")
    a = model.coef[:-1]
    out = np.empty(tau)
    for j in range(tau):
        val = model.intercept + sum(a[k] * hist[-1 - k] for k in range(model.lag))
        out[j] = val
        if model.lag:
            hist.append(val)
    return out


def select_lag(x, max_lag: int = 10) -> int:
    """AIC-minimising lag in ``[1, max_lag]`` on a common estimation sample."""
    x = np.asarray(x, dtype=float)
    max_lag = max(1, min(max_lag, (len(x) - 2) // 2))
    if np.all(x == x[0]):
        return 1
    best, best_aic = 1, np.inf
    for lag in range(1, max_lag + 1):
        A, y = _design(x, lag, start=max_lag)
        coef = _solve(A, y)
        rss = float(np.sum((y - A @ coef) ** 2))
        n = len(y)
        aic = n * np.log(max(rss, 1e-300) / n) + 2 * (lag + 1)
        if aic < best_aic:
            best, best_aic = lag, aic
    return best


def ar_forecast_panel(X, tau: int, lag: int | None = None, max_lag: int = 10) -> np.ndarray:
    """Fit and forecast each column independently; returns (tau, n)."""
    X = np.asarray(X, dtype=float)
    out = np.empty((tau, X.shape[1]))
    for i in range(X.shape[1]):
        l = select_lag(X[:, i], max_lag) if lag is None else lag
        out[:, i] = ar_forecast(ar_fit(X[:, i], l), X[:, i], tau)
    return out
