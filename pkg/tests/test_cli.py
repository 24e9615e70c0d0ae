import json
import os

import numpy as np
import pytest
import yaml

from manifold_forecast import __version__
from manifold_forecast.cli import main
from manifold_forecast.synthdata import TimeSeriesPanel

SMALL_EXPERIMENT = {
    "name": "small",
    "generator": "linear",
    "n_runs": 2,
    "defaults": {"n_train": 300, "horizon": 50},
    "configs": [
        {"name": "Random Walk", "model": "random_walk"},
        {"name": "MVAR(OS)"},
        {"name": "DM-MVAR-GH", "embedding": "dm", "lifting": "gh"},
    ],
}


def _manifest_ok(out):
    m = json.loads((out / "manifest.json").read_text())
    for key in ("command", "config", "seed", "version", "output_dir", "timings_seconds", "outputs"):
        assert key in m
    assert all(os.path.exists(p) for p in m["outputs"])
    return m


@pytest.fixture
def experiment_file(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text(yaml.safe_dump(SMALL_EXPERIMENT))
    return p


def test_version(capsys):
    assert main(["version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_synth_outputs_are_byte_identical(tmp_path, experiment_file, capsys):
    for name in ("a", "b"):
        assert main(["synth", "--config", str(experiment_file), "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert "MVAR(OS)" in capsys.readouterr().out
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "rmse_table.csv").read_bytes() == (b / "rmse_table.csv").read_bytes()
    m = _manifest_ok(a)
    assert m["seed"] == 3 and m["config"]["n_runs"] == 2


def test_synth_model_override_and_runs(tmp_path, experiment_file):
    assert main(["synth", "--config", str(experiment_file), "--model", "nonlinear", "--runs", "1",
                 "--out", str(tmp_path / "o")]) == 0
    m = _manifest_ok(tmp_path / "o")
    assert m["config"]["generator"] == "nonlinear" and m["config"]["n_runs"] == 1


def test_synth_usage_errors(tmp_path, experiment_file):
    assert main(["synth", "--out", str(tmp_path / "o")]) == 1
    assert main(["synth", "--preset", "table1", "--config", str(experiment_file), "--out", str(tmp_path)]) == 1
    assert main(["synth", "--preset", "table7", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"generator": "linear", "configs": [{"name": "x", "model": "arima"}]}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["synth", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "o")]) == 1


def test_synth_all_runs_failing_exits_numeric(tmp_path, monkeypatch):
    from manifold_forecast import pipeline
    from manifold_forecast.errors import RankDeficientError

    def broken(*a, **k):
        raise RankDeficientError(1, 2)

    monkeypatch.setattr(pipeline.models, "fit_mvar", broken)
    p = tmp_path / "exp.yaml"
    p.write_text(yaml.safe_dump({**SMALL_EXPERIMENT, "configs": [{"name": "MVAR(OS)"}]}))
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == 3
    assert main(["synth", "--config", str(p), "--failure-policy", "raise", "--out", str(tmp_path / "o")]) == 3


def test_generate_embed_lift_chain(tmp_path):
    panel = tmp_path / "panel.csv"
    assert main(["generate", "--model", "linear", "--n", "200", "--seed", "1", "--out", str(panel)]) == 0
    for method in ("dm", "lle", "pca"):
        out = tmp_path / f"e_{method}"
        assert main(["embed", "--input", str(panel), "--method", method, "--d", "2", "--out", str(out)]) == 0
        coords = TimeSeriesPanel.from_csv(out / "coords.csv")
        assert coords.values.shape == (2, 200) and coords.variable_names == ("c1", "c2")
        _manifest_ok(out)
    e = tmp_path / "e_dm"
    pts = TimeSeriesPanel.from_csv(e / "coords.csv")
    TimeSeriesPanel(pts.values[:, :5], pts.variable_names).to_csv(tmp_path / "pts.csv")
    for method in ("gh", "rbf"):
        out = tmp_path / f"l_{method}"
        assert main(["lift", "--reference-coords", str(e / "coords.csv"), "--reference-panel", str(panel),
                     "--points", str(tmp_path / "pts.csv"), "--method", method, "--out", str(out)]) == 0
        lifted = TimeSeriesPanel.from_csv(out / "lifted.csv")
        assert lifted.values.shape == (5, 5)
        _manifest_ok(out)


def test_embed_errors(tmp_path):
    panel = tmp_path / "panel.csv"
    main(["generate", "--model", "linear", "--n", "50", "--out", str(panel)])
    assert main(["embed", "--input", str(panel), "--d", "0", "--out", str(tmp_path / "o")]) == 1
    assert main(["embed", "--input", str(panel), "--method", "lle", "--k", "100", "--out", str(tmp_path / "o")]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3,x\n")
    assert main(["embed", "--input", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_lift_mismatched_inputs(tmp_path):
    panel = tmp_path / "panel.csv"
    main(["generate", "--model", "linear", "--n", "60", "--out", str(panel)])
    short = tmp_path / "short.csv"
    TimeSeriesPanel(np.zeros((2, 10)), ("c1", "c2")).to_csv(short)
    assert main(["lift", "--reference-coords", str(short), "--reference-panel", str(panel),
                 "--points", str(short), "--out", str(tmp_path / "o")]) == 2


def test_forex_fixture_run_and_audit(tmp_path):
    cfg = tmp_path / "fx.yaml"
    cfg.write_text(yaml.safe_dump({
        "seed": 1,
        "variants": [{"name": "RW", "model": "random_walk"},
                     {"name": "PCA-MVAR/100", "embedding": "pca", "lifting": "linear"}],
    }))
    for name in ("a", "b"):
        assert main(["forex", "--config", str(cfg), "--audit", "--out", str(tmp_path / name)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    summary = json.loads((a / "sharpe_summary.json").read_text())
    assert set(summary["variants"]) == {"RW", "PCA-MVAR/100"}
    for f in os.listdir(a):
        if f.startswith("ledger_"):
            assert (a / f).read_bytes() == (b / f).read_bytes()
    _manifest_ok(a)


def test_forex_custom_fixture_and_bad_rates(tmp_path):
    assert main(["forex-fixture", "--days", "270", "--out", str(tmp_path / "fx")]) == 0
    prices, rates = tmp_path / "fx" / "fx_prices.csv", tmp_path / "fx" / "fx_rates.csv"
    cfg = tmp_path / "fx.yaml"
    cfg.write_text(yaml.safe_dump({"variants": [{"name": "RW", "model": "random_walk"}]}))
    assert main(["forex", "--prices", str(prices), "--rates", str(rates), "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == 0
    rates.write_text("date,region,annual_rate_percent\n2019-01-01,USA,1.0\n")
    assert main(["forex", "--prices", str(prices), "--rates", str(rates), "--config", str(cfg),
                 "--out", str(tmp_path / "o2")]) == 2
