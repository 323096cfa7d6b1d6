"""Price panel ingestion and synthetic panel generators."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

MISSING = {"", "na", "nan", "null", "none"}


@dataclass
class PriceFrame:
    dates: list[dt.date]
    tickers: list[str]
    values: np.ndarray  # (T, n) adjusted closes

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def slice(self, rows: slice) -> "PriceFrame":
        return PriceFrame(self.dates[rows], list(self.tickers), self.values[rows].copy())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", *self.tickers])
            for d, row in zip(self.dates, self.values):
                w.writerow([d.isoformat(), *(format(float(v), ".17g") for v in row)])


def ingest(csv_path, missing_policy: str = "reject") -> PriceFrame:
    """Read a ``date,<ticker>,...`` CSV of adjusted closes.

    ``forward_fill`` copies the previous value into gaps after a series'
    first observation; gaps before it are always rejected.
    """
    policy = missing_policy.replace("-", "_")
    if policy not in ("reject", "forward_fill"):
        raise ValueError(f"unknown missing policy {missing_policy!r}")
    path = Path(csv_path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if header[0].lower() != "date" or len(header) < 2:
        raise DataError(f"{path}: header must be 'date,<ticker1>,...'")
    tickers = header[1:]
    if len(set(tickers)) != len(tickers):
        raise DataError(f"{path}: duplicate ticker names")
    dates: list[dt.date] = []
    values = np.full((len(rows) - 1, len(tickers)), np.nan)
    for r_i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r_i + 2} has {len(row)} fields, expected {len(header)}")
        try:
            d = dt.date.fromisoformat(row[0].strip())
        except ValueError:
            raise DataError(f"{path}: invalid ISO-8601 date {row[0]!r}") from None
        if dates and d == dates[-1]:
            raise DataError(f"{path}: duplicate date {d.isoformat()}")
        if dates and d < dates[-1]:
            raise DataError(f"{path}: dates not increasing at {d.isoformat()}")
        dates.append(d)
        for j, cell in enumerate(row[1:]):
            c = cell.strip()
            if c.lower() in MISSING:
                continue
            try:
                v = float(c)
            except ValueError:
                raise DataError(f"{path}: non-numeric value {c!r} on {d.isoformat()}") from None
            if not math.isfinite(v) or v <= 0:
                raise DataError(f"{path}: non-positive price {c} for {tickers[j]} on {d.isoformat()}")
            values[r_i, j] = v
    if not dates:
        raise DataError(f"{path}: no data rows")
    for j, name in enumerate(tickers):
        col = values[:, j]
        gaps = np.flatnonzero(np.isnan(col))
        if not gaps.size:
            continue
        if np.isnan(col[0]):
            raise DataError(f"{path}: leading gap in {name} on {dates[0].isoformat()}")
        if policy == "reject":
            raise DataError(f"{path}: missing value for {name} on {dates[gaps[0]].isoformat()}")
        for g in gaps:
            col[g] = col[g - 1]
    return PriceFrame(dates, tickers, values)


# -- synthetic panels ------------------------------------------------------------


def business_days(n: int, start: dt.date = dt.date(2000, 1, 3)) -> list[dt.date]:
    days = np.busday_offset(np.datetime64(start), np.arange(n), roll="forward")
    return [d.astype(object) for d in days]


def _prices(returns: np.ndarray, x0: float) -> np.ndarray:
    return x0 * np.exp(np.cumsum(returns, axis=0))


def _frame(values: np.ndarray, prefix: str = "S") -> PriceFrame:
    n = values.shape[1]
    return PriceFrame(business_days(values.shape[0]), [f"{prefix}{i}" for i in range(n)], values)


def ar1_panel(n: int = 5, T: int = 1000, phi: float = 0.9, sigma: float = 0.01, x0: float = 100.0, burn: int = 100, seed: int = 0) -> PriceFrame:
    """Log-returns follow independent AR(1) processes with coefficient ``phi``."""
    if not -1 < phi < 1 or sigma <= 0 or n < 1 or T < 2:
        raise ValueError("ar1_panel needs |phi| < 1, sigma > 0, n >= 1, T >= 2")
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, sigma, (T + burn, n))
    r = np.zeros_like(eps)
    for t in range(1, T + burn):
        r[t] = phi * r[t - 1] + eps[t]
    return _frame(_prices(r[burn:], x0))


def regime_switch(
    n: int = 4,
    T: int = 1500,
    segment: int = 250,
    phi1: float = 0.8,
    phi2: tuple[float, float] = (0.0, 0.8),
    sigma: float = 0.01,
    x0: float = 100.0,
    seed: int = 0,
) -> PriceFrame:
    """Log-returns alternate between AR(1) and AR(2) segments of ``segment`` steps.

    Segment ``s`` is AR(1) for even ``s`` and AR(2) for odd ``s``; all series
    share the segment boundaries.
    """
    if segment < 3 or sigma <= 0 or n < 1 or T < 3:
        raise ValueError("regime_switch needs segment >= 3, sigma > 0, n >= 1, T >= 3")
    a1, a2 = phi2
    if not (abs(phi1) < 1 and abs(a2) < 1 and a1 + a2 < 1 and a2 - a1 < 1):
        raise ValueError("regime coefficients must be stationary")
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, sigma, (T, n))
    r = np.zeros((T, n))
    for t in range(2, T):
        if (t // segment) % 2 == 0:
            r[t] = phi1 * r[t - 1] + eps[t]
        else:
            r[t] = a1 * r[t - 1] + a2 * r[t - 2] + eps[t]
    return _frame(_prices(r, x0))


def regime_labels(T: int, segment: int = 250) -> np.ndarray:
    """True AR order (1 or 2) of each time step of :func:`regime_switch`."""
    return np.where((np.arange(T) // segment) % 2 == 0, 1, 2)


def dominant_asset(n: int = 4, T: int = 500, drift: float = 0.002, sigma: float = 0.01, x0: float = 100.0, seed: int = 0) -> PriceFrame:
    """Asset 0 rises every day; the others are driftless random walks."""
    if n < 2 or T < 2 or sigma <= 0 or drift <= 0:
        raise ValueError("dominant_asset needs n >= 2, T >= 2, sigma > 0, drift > 0")
    rng = np.random.default_rng(seed)
    r = rng.normal(0.0, sigma, (T, n))
    r[:, 0] = drift + np.abs(r[:, 0]) * 0.1
    r[0] = 0.0
    return _frame(_prices(r, x0))


SYNTH = {"ar1_panel": ar1_panel, "regime_switch": regime_switch, "dominant_asset": dominant_asset}


def synth(kind: str, params: dict | None = None, seed: int = 0) -> PriceFrame:
    try:
        fn = SYNTH[kind]
    except KeyError:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {sorted(SYNTH)}") from None
    try:
        return fn(seed=seed, **(params or {}))
    except TypeError as exc:
        raise ValueError(f"invalid parameters for {kind}: {exc}") from None
