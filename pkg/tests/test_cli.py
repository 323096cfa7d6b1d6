import json
from pathlib import Path

import numpy as np
import pytest

from stann import cli, data
from stann.actm import ActmParams
from stann.model import read_checkpoint, write_checkpoint

FAST = ["--set", "N=3", "--set", "width=6", "--set", "blocks=1", "--set", "layers=1", "--set", "max_lag=4", "--set", "train_window=60"]


@pytest.fixture
def panel(tmp_path):
    path = tmp_path / "ar1.csv"
    data.ar1_panel(n=2, T=120, seed=0).to_csv(path)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def outputs(out: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


def test_exit_codes(tmp_path, panel, capsys):
    assert run("cv", "--data", tmp_path / "missing.csv", "--out", tmp_path / "o") == 2
    assert run("cv", "--data", panel, "--set", "lam=-1", "--out", tmp_path / "o") == 1
    assert run("cv", "--data", panel, "--set", "bogus=1", "--out", tmp_path / "o") == 1
    with pytest.raises(SystemExit) as exc:
        run("explode")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("cv", "--tau", "soon")
    assert exc.value.code == 1


def test_grad_check_command(tmp_path, capsys):
    assert run("grad-check", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "gradcheck.json").read_text())
    assert doc["max_rel_error"] < 1e-4
    assert "max relative error" in capsys.readouterr().out


def test_synth_writes_prices(tmp_path):
    assert run("synth", "regime_switch", "--param", "T=60", "--param", "n=2", "--seed", 3, "--out", tmp_path) == 0
    frame = data.ingest(tmp_path / "prices.csv")
    assert (frame.T, frame.n) == (60, 2)
    assert run("synth", "ar1_panel", "--param", "wobble=1", "--out", tmp_path / "x") == 1


def test_train_forecast_and_trace(tmp_path, panel):
    out = tmp_path / "train"
    assert run("train", "--data", panel, "--epochs", 5, "--out", out, *FAST) == 0
    assert (out / "losses.csv").read_text().count("\n") == 6
    fc_out = tmp_path / "fc"
    assert run("forecast", "--checkpoint", out / "checkpoint.stann", "--tau", 4, "--out", fc_out) == 0
    assert (fc_out / "forecast.csv").read_text().splitlines()[0] == "step,series,value"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["outputs"] == ["checkpoint.stann", "losses.csv"]
    assert set(manifest["versions"]) == {"stann", "numpy", "python"}


def test_trace_on_saturated_checkpoint(tmp_path, panel):
    assert run("train", "--data", panel, "--epochs", 1, "--out", tmp_path, *FAST) == 0
    model, extras = read_checkpoint(tmp_path / "checkpoint.stann")
    model.actm = ActmParams.constant(model.cfg.N, 0.999)
    write_checkpoint(tmp_path / "sat.stann", model, extras)
    assert run("trace-ar-order", "--checkpoint", tmp_path / "sat.stann", "--out", tmp_path / "t") == 0
    rows = (tmp_path / "t" / "ar_order.csv").read_text().splitlines()[1:]
    assert rows and all(r.endswith(",1") for r in rows)


def test_cv_evaluate_backtest_and_rerun(tmp_path, panel):
    out = tmp_path / "cv"
    args = ["cv", "--data", panel, "--tau", 5, "--origins", 3, "--epochs", 3, "--out", out, *FAST]
    assert run(*args) == 0
    naive = json.loads((out / "metrics_naive.json").read_text())
    assert naive["mase_mean"] == 1.0 and naive["theil_mean"] == 1.0

    ev = tmp_path / "ev"
    assert run("evaluate", "--data", panel, "--forecasts", out / "forecasts.csv", "--out", ev, *FAST) == 0
    assert (ev / "metrics_stann.json").read_bytes() == (out / "metrics_stann.json").read_bytes()
    assert json.loads((ev / "metrics_naive.json").read_text())["mase_mean"] == 1.0

    bt_out = tmp_path / "bt"
    assert run("backtest", "--data", panel, "--forecasts", out / "forecasts.csv", "--rf", "0.02", "--out", bt_out) == 0
    summ = json.loads((bt_out / "summary.json").read_text())
    assert {"sharpe", "max_drawdown", "total_profit_pct"} <= set(summ)
    assert len((bt_out / "equity.csv").read_text().splitlines()) == 1 + 4
    assert run("backtest", "--data", panel, "--forecasts", out / "forecasts.csv", "--model", "lstm", "--out", bt_out) == 2

    for d in (out, ev, bt_out):
        again = tmp_path / (d.name + "_again")
        assert run("rerun", d / "manifest.json", "--out", again) == 0
        assert outputs(again) == outputs(d)


def test_rf_csv(tmp_path):
    import datetime as dt

    p = tmp_path / "rf.csv"
    p.write_text("date,rate\n2020-01-01,0.05\n2020-06-01,0.10\n")
    rf = cli._rf_per_period(str(p), [dt.date(2020, 3, 1), dt.date(2020, 7, 1)], 21)
    np.testing.assert_allclose(rf, [1.05 ** (21 / 252) - 1, 1.10 ** (21 / 252) - 1])
    from stann.errors import DataError

    with pytest.raises(DataError):
        cli._rf_per_period(str(p), [dt.date(2019, 1, 1)], 21)


def test_ablate_grid(tmp_path, panel):
    out = tmp_path / "ab"
    assert run("ablate", "--data", panel, "--tau", 5, "--origins", 2, "--epochs", 2, "--seeds", 2, "--out", out, *FAST) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "actm,stack,seeds,mase_median,theil_median,mda_median"
    assert [r.split(",")[:2] for r in rows[1:]] == [["on", "on"], ["on", "off"], ["off", "on"], ["off", "off"]]
    assert len((out / "ablation_seeds.csv").read_text().splitlines()) == 1 + 8
