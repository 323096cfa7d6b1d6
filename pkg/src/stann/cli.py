"""Command line entry point: ``stann <subcommand> [options]``.

Every subcommand writes its outputs plus ``manifest.json`` into ``--out``.
``stann rerun <manifest>`` repeats a run from the manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import math
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import actm as actm_mod
from . import backtest as bt
from . import baselines
from . import data as data_mod
from . import diffcore as dc
from . import metrics
from . import train
from .config import RunConfig, load_config, parse_config, variant_overrides
from .errors import ConfigError, DataError, NumericError, StannError
from .model import LossConfig, ModelConfig, StannModel, read_checkpoint, write_checkpoint

log = logging.getLogger("stann")

COMMANDS = ("train", "forecast", "evaluate", "cv", "backtest", "grad-check", "trace-ar-order", "ablate", "synth")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    return format(float(v), ".17g")


# -- run context -------------------------------------------------------------------


class Run:
    def __init__(self, command: str, cfg: RunConfig, extra: dict | None = None):
        self.command = command
        self.cfg = cfg
        self.extra = dict(extra or {})
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self) -> None:
        doc = {
            "command": self.command,
            "config": self.cfg.to_dict(),
            "extra": self.extra,
            "seed": self.cfg.train.seed,
            "versions": {"stann": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
            "outputs": sorted(self.outputs),
        }
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_frame(cfg: RunConfig) -> data_mod.PriceFrame:
    if not cfg.data:
        raise ConfigError("no input data: pass --data <csv>")
    return data_mod.ingest(cfg.data, cfg.missing)


def _window(values: np.ndarray, window: int) -> np.ndarray:
    return values[-window:] if values.shape[0] > window else values


def _fit(values: np.ndarray, tcfg: train.TrainConfig, names=None) -> train.Checkpoint:
    try:
        return train.fit(values, tcfg, names)
    except NumericError as exc:
        ck = getattr(exc, "checkpoint", None)
        if ck is not None:
            log.error("training diverged; last good parameters kept in memory only")
        raise


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- subcommands ---------------------------------------------------------------------


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    frame = _load_frame(cfg)
    X = _window(frame.values, cfg.train.train_window)
    ck = _fit(X, cfg.train, frame.tickers)
    write_checkpoint(run.path("checkpoint.stann"), ck.model, ck.extras())
    _write_rows(run.path("losses.csv"), ["epoch", "loss"], ([i, _fmt(v)] for i, v in enumerate(ck.losses)))
    print(f"trained {X.shape[0]} x {X.shape[1]} panel, final loss {ck.losses[-1] if ck.losses else float('nan'):.6g}")


def _load_checkpoint(cfg: RunConfig) -> train.Checkpoint:
    if not cfg.checkpoint:
        raise ConfigError("no checkpoint: pass --checkpoint <file>")
    model, extras = read_checkpoint(cfg.checkpoint)
    for k in ("scaler.median", "scaler.iqr", "last_obs"):
        if k not in extras:
            raise DataError(f"{cfg.checkpoint}: checkpoint lacks {k!r}; was it written by 'train'?")
    return train.Checkpoint.from_parts(model, extras)


def cmd_forecast(run: Run) -> None:
    ck = _load_checkpoint(run.cfg)
    fc = ck.forecast(run.cfg.train.tau)
    rows = ([step, i, _fmt(fc[step - 1, i])] for step in range(1, fc.shape[0] + 1) for i in range(fc.shape[1]))
    _write_rows(run.path("forecast.csv"), ["step", "series", "value"], rows)
    print(f"wrote {fc.shape[0]}-step forecast for {fc.shape[1]} series")


def _cv_results(X: np.ndarray, cfg: RunConfig) -> dict[str, train.CvResult]:
    t = cfg.train
    splits = train.cv_splits(X.shape[0], t.train_window, t.tau, cfg.origins)
    return {
        "naive": train.evaluate_forecaster(X, splits, train.naive_forecaster(t.tau), "naive"),
        "ar": train.evaluate_forecaster(X, splits, train.ar_forecaster(t.tau), "ar"),
        "stann": train.evaluate_forecaster(X, splits, train.stann_forecaster(t), "stann"),
    }


def _write_forecasts(path: Path, results: dict[str, train.CvResult]) -> None:
    def rows():
        for name, res in results.items():
            for split, fc in zip(res.splits, res.forecasts):
                for i in range(fc.shape[1]):
                    for step in range(fc.shape[0]):
                        yield [name, split.origin, i, step + 1, _fmt(fc[step, i])]

    _write_rows(path, ["model", "origin", "series", "step", "value"], rows())


def _read_forecasts(path) -> dict[str, dict[int, np.ndarray]]:
    out: dict[str, dict[int, dict]] = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["model", "origin", "series", "step", "value"]:
                raise DataError(f"{path}: expected header model,origin,series,step,value")
            for r in reader:
                cell = out.setdefault(r["model"], {}).setdefault(int(r["origin"]), {})
                cell[(int(r["step"]), int(r["series"]))] = float(r["value"])
    except OSError as exc:
        raise DataError(f"cannot read forecasts {path}: {exc}") from None
    except (KeyError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed forecast row ({exc})") from None
    arrays: dict[str, dict[int, np.ndarray]] = {}
    for name, by_origin in out.items():
        arrays[name] = {}
        for origin, cells in by_origin.items():
            tau = max(s for s, _ in cells)
            n = max(i for _, i in cells) + 1
            if len(cells) != tau * n:
                raise DataError(f"{path}: incomplete forecast for {name} at origin {origin}")
            fc = np.empty((tau, n))
            for (s, i), v in cells.items():
                fc[s - 1, i] = v
            arrays[name][origin] = fc
    return arrays


def _score_and_write(run: Run, X: np.ndarray, results: dict[str, train.CvResult], dataset: str) -> dict:
    per_model = {name: res.table for name, res in results.items()}
    report = metrics.relative_report(per_model, naive="naive", dataset=dataset)
    for name, res in results.items():
        rel = metrics.relative_rows(res.table, per_model["naive"])
        metrics.write_cv_report(run.path(f"cv_report_{name}.csv"), rel)
        metrics.write_metrics_json(run.path(f"metrics_{name}.json"), report[name])
        entries = []
        for split, fc in zip(res.splits, res.forecasts):
            for i in range(X.shape[1]):
                frame = metrics.EvalFrame(X[split.train, i], X[split.test, i], fc[:, i])
                entries.append((split.origin, i, metrics.ipf(frame)))
        metrics.write_ipf_csv(run.path(f"ipf_{name}.csv"), entries)
    return report


def _print_report(report: dict) -> None:
    for name, r in report.items():
        print(f"{name:>6}: rel MASE {r['mase_mean']:.4f} ± {r['mase_std']:.4f}  rel U {r['theil_mean']:.4f} ± {r['theil_std']:.4f}  MDA {r['mda_mean']:.4f} ± {r['mda_std']:.4f}")


def cmd_cv(run: Run) -> None:
    frame = _load_frame(run.cfg)
    X = frame.values
    results = _cv_results(X, run.cfg)
    _write_forecasts(run.path("forecasts.csv"), results)
    report = _score_and_write(run, X, results, Path(run.cfg.data).stem)
    _print_report(report)


def cmd_evaluate(run: Run) -> None:
    cfg = run.cfg
    if not cfg.forecasts:
        raise ConfigError("no forecasts: pass --forecasts <forecasts.csv>")
    frame = _load_frame(cfg)
    X = frame.values
    stored = _read_forecasts(cfg.forecasts)
    if "naive" not in stored:
        raise DataError(f"{cfg.forecasts}: no naive forecasts to normalise against")
    results = {}
    for name, by_origin in stored.items():
        splits, fcs = [], []
        for origin, fc in sorted(by_origin.items()):
            tau = fc.shape[0]
            if origin + tau > X.shape[0] or origin - cfg.train.train_window < 0 or fc.shape[1] != X.shape[1]:
                raise DataError(f"forecast for {name} at origin {origin} does not fit the data panel")
            splits.append(train.CvSplit(origin, slice(origin - cfg.train.train_window, origin), slice(origin, origin + tau)))
            fcs.append(fc)
        results[name] = train.CvResult(name, splits, fcs, train.score_forecasts(X, splits, fcs))
    report = _score_and_write(run, X, results, Path(cfg.data).stem)
    _print_report(report)


def _rf_per_period(spec: str, dates: list, tau: int) -> np.ndarray:
    """Per-period cash return at each rebalance date from an annual rate."""
    try:
        annual = np.full(len(dates), float(spec))
    except ValueError:
        path = Path(spec)
        try:
            with open(path, newline="") as fh:
                rows = [r for r in csv.reader(fh) if r]
        except OSError as exc:
            raise DataError(f"cannot read risk-free file {path}: {exc}") from None
        try:
            table = sorted((dt.date.fromisoformat(r[0].strip()), float(r[1])) for r in rows[1:])
        except (ValueError, IndexError):
            raise DataError(f"{path}: expected 'date,rate' rows with ISO dates and annual decimal rates") from None
        annual = np.empty(len(dates))
        for k, d in enumerate(dates):
            past = [rate for day, rate in table if day <= d]
            if not past:
                raise DataError(f"{path}: no risk-free rate on or before {d.isoformat()}")
            annual[k] = past[-1]
    if (annual <= -1).any() or not np.isfinite(annual).all():
        raise DataError("risk-free rates must be finite and above -100%")
    return (1.0 + annual) ** (tau / bt.TRADING_DAYS) - 1.0


def cmd_backtest(run: Run) -> None:
    cfg = run.cfg
    if not cfg.forecasts:
        raise ConfigError("no forecasts: pass --forecasts <forecasts.csv>")
    frame = _load_frame(cfg)
    stored = _read_forecasts(cfg.forecasts)
    name = run.extra.get("model", "stann")
    if name not in stored:
        raise DataError(f"{cfg.forecasts}: no forecasts for model {name!r} (have {sorted(stored)})")
    by_origin = stored[name]
    origins = sorted(by_origin)
    tau = by_origin[origins[0]].shape[0]
    if any(b - a != tau for a, b in zip(origins, origins[1:])):
        raise DataError("backtest needs origins spaced exactly one horizon apart")
    idx = [o - 1 for o in origins] + [origins[-1] + tau - 1]
    if idx[0] < 0 or idx[-1] >= frame.T:
        raise DataError("forecast origins fall outside the price panel")
    prices = frame.values[idx]
    dates = [frame.dates[i] for i in idx]
    rf = _rf_per_period(cfg.rf, dates[:-1], tau)
    forecasts = [by_origin[o] for o in origins]
    p, summ = bt.run_backtest(prices, forecasts, cfg.strategy, rf, dates=[d.isoformat() for d in dates], tau=tau, annualization=cfg.annualization)
    bt.write_equity_csv(run.path("equity.csv"), p, [d.isoformat() for d in dates])
    bt.write_trades_csv(run.path("trades.csv"), p, frame.tickers)
    bt.write_summary_json(run.path("summary.json"), summ, {"model": name, "strategy": cfg.strategy, "tau": tau, "annualization": cfg.annualization})
    sr = "undefined" if summ["sharpe"] is None else f"{summ['sharpe']:.4f}"
    print(f"profit {summ['total_profit_pct']:.2f}%  Sharpe {sr}  max drawdown {summ['max_drawdown']:.4f}")


def toy_problem(seed: int = 0):
    """Small STANN-D instance used by ``grad-check``."""
    rng = np.random.default_rng(seed)
    T, n = 6, 2
    cfg = ModelConfig(n=n, N=3, R=1, variant="D", blocks=2, layers=2, width=4)
    model = StannModel(cfg, T, seed=seed)
    X = rng.normal(0.0, 1.0, (T, n, 1)).cumsum(axis=0)
    return model, X, LossConfig(lam=0.5, gamma=0.1)


def cmd_grad_check(run: Run) -> None:
    model, X, loss_cfg = toy_problem(run.cfg.train.seed)
    params = list(model.parameters().values())
    err = dc.grad_check(lambda: model.loss(X, loss_cfg), params)
    with open(run.path("gradcheck.json"), "w") as fh:
        json.dump({"max_rel_error": err, "parameters": int(sum(p.data.size for p in params))}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"max relative error: {err:.3e}")
    if not err < 1e-4:
        raise NumericError(f"gradient check failed: {err:.3e} >= 1e-4")


def cmd_trace(run: Run) -> None:
    cfg = run.cfg
    if cfg.checkpoint:
        model = _load_checkpoint(cfg).model
    else:
        frame = _load_frame(cfg)
        model = _fit(_window(frame.values, cfg.train.train_window), cfg.train, frame.tickers).model
    orders = actm_mod.effective_order_trace(model)
    actm_mod.write_trace_csv(run.path("ar_order.csv"), orders)
    counts = np.bincount(orders.reshape(-1))
    share = {str(k): counts[k] / orders.size for k in range(1, counts.size) if counts[k]}
    with open(run.path("ar_order_summary.json"), "w") as fh:
        json.dump({"entries": int(orders.size), "share": share}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print("order shares: " + ", ".join(f"{k}: {v:.3f}" for k, v in share.items()))


ABLATION_GRID = ((True, "residual"), (True, "linear"), (False, "residual"), (False, "linear"))


def cmd_ablate(run: Run) -> None:
    cfg = run.cfg
    frame = _load_frame(cfg)
    X = frame.values
    t = cfg.train
    splits = train.cv_splits(X.shape[0], t.train_window, t.tau, cfg.origins)
    naive = train.evaluate_forecaster(X, splits, train.naive_forecaster(t.tau), "naive")
    rows = []
    for use_actm, stack in ABLATION_GRID:
        scores = {"mase": [], "theil_u": [], "mda": []}
        for k in range(cfg.seeds):
            variant_cfg = replace(t, seed=t.seed + k, stack=stack, max_lag=t.max_lag if use_actm else 1)
            res = train.evaluate_forecaster(X, splits, train.stann_forecaster(variant_cfg), "stann")
            rel = metrics.relative_rows(res.table, naive.table)
            for key in scores:
                scores[key].append(float(np.mean([r[key] for r in rel])))
        rows.append(
            {
                "actm": "on" if use_actm else "off",
                "stack": "on" if stack == "residual" else "off",
                "seeds": cfg.seeds,
                "mase_median": float(np.median(scores["mase"])),
                "theil_median": float(np.median(scores["theil_u"])),
                "mda_median": float(np.median(scores["mda"])),
                "mase_per_seed": scores["mase"],
            }
        )
    _write_rows(
        run.path("ablation.csv"),
        ["actm", "stack", "seeds", "mase_median", "theil_median", "mda_median"],
        ([r["actm"], r["stack"], r["seeds"], _fmt(r["mase_median"]), _fmt(r["theil_median"]), _fmt(r["mda_median"])] for r in rows),
    )
    _write_rows(
        run.path("ablation_seeds.csv"),
        ["actm", "stack", "seed", "mase"],
        ([r["actm"], r["stack"], t.seed + k, _fmt(v)] for r in rows for k, v in enumerate(r["mase_per_seed"])),
    )
    for r in rows:
        print(f"ACTM {r['actm']:>3}  stack {r['stack']:>3}: median rel MASE {r['mase_median']:.4f}")


def cmd_synth(run: Run) -> None:
    kind = run.extra.get("kind")
    params = run.extra.get("params", {})
    try:
        frame = data_mod.synth(kind, params, run.cfg.train.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    frame.to_csv(run.path("prices.csv"))
    print(f"wrote {kind} panel: T={frame.T}, n={frame.n}")


HANDLERS = {
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "cv": cmd_cv,
    "backtest": cmd_backtest,
    "grad-check": cmd_grad_check,
    "trace-ar-order": cmd_trace,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
}


# -- argument handling -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (or a run manifest)")
    p.add_argument("--data", help="price CSV: date,<ticker1>,...")
    p.add_argument("--variant", choices=["stann", "stann-r", "stann-d", "stnn"])
    p.add_argument("--tau", type=int, help="forecast horizon (default 21)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--missing", choices=["reject", "forward-fill"])
    p.add_argument("--strategy", choices=["simple", "equal"])
    p.add_argument("--rf", help="annual risk-free rate, or a date,rate CSV")
    p.add_argument("--annualization", choices=["conventional", "paper"])
    p.add_argument("--checkpoint")
    p.add_argument("--forecasts")
    p.add_argument("--origins", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stann", description="Spatiotemporal adaptive forecaster.")
    parser.add_argument("--version", action="version", version=f"stann {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "backtest":
            p.add_argument("--model", default=None, help="which model's forecasts to trade (default stann)")
        if name == "synth":
            p.add_argument("kind", choices=sorted(data_mod.SYNTH))
            p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
    rerun = sub.add_parser("rerun", help="repeat a run from its manifest")
    rerun.add_argument("manifest")
    rerun.add_argument("--out", help="output directory (default: the manifest's)")
    rerun.add_argument("-v", "--verbose", action="store_true")
    return parser


FLAG_KEYS = ("data", "tau", "seed", "out", "missing", "strategy", "rf", "annualization", "checkpoint", "forecasts", "origins", "seeds", "epochs")


def resolve_config(args) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(load_config(args.config))
    if args.variant:
        values.update(variant_overrides(args.variant))
    for key in FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    for item in args.set:
        # a later --set for the same key wins
        values.update(parse_config(item, "--set"))
    for key in ("data", "checkpoint", "forecasts"):
        if values.get(key) and not str(values[key]).startswith("/"):
            values[key] = str(Path(values[key]).resolve())
    return RunConfig.from_dict(values)


def _extra(args) -> dict:
    extra = {}
    if args.command == "backtest" and args.model:
        extra["model"] = args.model
    if args.command == "synth":
        extra["kind"] = args.kind
        extra["params"] = parse_config("\n".join(args.param), "--param")
    return extra


def execute(command: str, cfg: RunConfig, extra: dict) -> None:
    run = Run(command, cfg, extra)
    HANDLERS[command](run)
    run.finish()


def rerun(manifest_path: str, out: str | None) -> None:
    try:
        doc = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {manifest_path}: {exc}") from None
    if doc.get("command") not in HANDLERS:
        raise ConfigError(f"{manifest_path}: unknown command {doc.get('command')!r}")
    values = dict(doc["config"])
    if out:
        values["out"] = out
    execute(doc["command"], RunConfig.from_dict(values), doc.get("extra", {}))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            rerun(args.manifest, args.out)
        else:
            execute(args.command, resolve_config(args), _extra(args))
    except StannError as exc:
        print(f"stann: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        # invalid settings that slipped past config validation
        print(f"stann: error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"stann: numeric error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
