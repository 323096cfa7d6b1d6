"""Scale-free forecast accuracy metrics and relative-to-naive reporting.

Theil's U is the U2 form: RMSE of the forecast over the horizon divided by
the RMSE of persistence (repeating the last in-sample value). Persistence
therefore scores exactly 1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError


@dataclass
class EvalFrame:
    insample: np.ndarray
    actual: np.ndarray
    forecast: np.ndarray
    s: int = 1

    def __post_init__(self):
        self.insample = np.asarray(self.insample, dtype=float).reshape(-1)
        self.actual = np.asarray(self.actual, dtype=float).reshape(-1)
        self.forecast = np.asarray(self.forecast, dtype=float).reshape(-1)
        if self.actual.size < 1 or self.actual.shape != self.forecast.shape:
            raise ValueError("actual and forecast must be non-empty and of equal length")
        if self.insample.size <= self.s:
            raise ValueError(f"in-sample length must exceed the seasonality {self.s}")


def _scale(frame: EvalFrame) -> float:
    x = frame.insample
    d = float(np.mean(np.abs(x[frame.s :] - x[: -frame.s])))
    if d == 0.0:
        raise UndefinedMetricError("in-sample naive error is zero; scaled metric undefined")
    return d


def ipf(frame: EvalFrame) -> np.ndarray:
    """Absolute scaled error of each individual point forecast."""
    return np.abs(frame.actual - frame.forecast) / _scale(frame)


def mase(frame: EvalFrame) -> float:
    return float(np.mean(ipf(frame)))


def theil_u(frame: EvalFrame) -> float:
    last = frame.insample[-1]
    denom = np.sqrt(np.mean((frame.actual - last) ** 2))
    if denom == 0.0:
        raise UndefinedMetricError("persistence RMSE is zero; Theil's U undefined")
    return float(np.sqrt(np.mean((frame.actual - frame.forecast) ** 2)) / denom)


def mda(frame: EvalFrame, x_last: float | None = None) -> float:
    """Share of steps whose cumulative change from ``x_last`` has the right sign."""
    last = frame.insample[-1] if x_last is None else float(x_last)
    hit = np.sign(frame.forecast - last) == np.sign(frame.actual - last)
    return float(np.mean(hit))


# -- reporting -------------------------------------------------------------------


def _index(rows):
    return {(r["origin"], r["series"]): r for r in rows}


def relative_rows(model_rows: list[dict], naive_rows: list[dict]) -> list[dict]:
    """Divide MASE and Theil's U by naive's for the same (origin, series)."""
    naive = _index(naive_rows)
    out = []
    for r in model_rows:
        key = (r["origin"], r["series"])
        if key not in naive:
            raise KeyError(f"missing naive run for origin {key[0]}, series {key[1]}")
        nr = naive[key]
        if nr["mase"] <= 0 or nr["theil_u"] <= 0:
            raise UndefinedMetricError(f"naive score is zero at origin {key[0]}, series {key[1]}")
        out.append({**r, "mase": r["mase"] / nr["mase"], "theil_u": r["theil_u"] / nr["theil_u"]})
    return out


def relative_report(metric_per_model: dict[str, list[dict]], naive: str = "naive", dataset: str = "", granularity: str = "origin") -> dict[str, dict]:
    """Mean and standard deviation of relative metrics across runs.

    ``granularity="origin"`` averages over series first and takes statistics
    across origins; ``"series"`` takes them across every (origin, series).
    MDA is reported raw.
    """
    if naive not in metric_per_model:
        raise KeyError(f"missing naive run {naive!r}")
    report = {}
    for name, rows in metric_per_model.items():
        rel = relative_rows(rows, metric_per_model[naive])
        if granularity == "origin":
            groups: dict[int, list[dict]] = {}
            for r in rel:
                groups.setdefault(r["origin"], []).append(r)
            vals = {k: np.array([np.mean([r[k] for r in g]) for _, g in sorted(groups.items())]) for k in ("mase", "theil_u", "mda")}
        elif granularity == "series":
            vals = {k: np.array([r[k] for r in rel]) for k in ("mase", "theil_u", "mda")}
        else:
            raise ValueError(f"unknown granularity {granularity!r}")
        report[name] = {
            "model": name,
            "dataset": dataset,
            "origins": len({r["origin"] for r in rel}),
            "mase_mean": float(vals["mase"].mean()),
            "mase_std": float(vals["mase"].std()),
            "theil_mean": float(vals["theil_u"].mean()),
            "theil_std": float(vals["theil_u"].std()),
            "mda_mean": float(vals["mda"].mean()),
            "mda_std": float(vals["mda"].std()),
        }
    return report


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_cv_report(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin", "series", "mase", "theil_u", "mda"])
        for r in rows:
            w.writerow([r["origin"], r["series"], _fmt(r["mase"]), _fmt(r["theil_u"]), _fmt(r["mda"])])


def write_ipf_csv(path, entries) -> None:
    """``entries`` yields ``(origin, series, values)`` triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin", "series", "step", "value"])
        for origin, series, values in entries:
            for step, v in enumerate(values, start=1):
                w.writerow([origin, series, step, _fmt(v)])


def write_metrics_json(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
