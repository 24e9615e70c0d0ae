import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from manifold_forecast import forex
from manifold_forecast.errors import ConfigError, DataError, ManifoldForecastError
from manifold_forecast.forex import (
    BacktestConfig,
    carry_adjusted_returns,
    default_variants,
    interpolate_rates,
    load_dataset,
    log_returns,
    risk_parity_step,
    run_backtest,
    sharpe_ratio,
    trade_signals,
    variants_from_dict,
)
from manifold_forecast.pipeline import PipelineConfig


@pytest.fixture(scope="module")
def dataset():
    return load_dataset(*forex.fixture_paths())


def _variant(name, **kw):
    return BacktestConfig(PipelineConfig(name=name, d=3, **kw), train_window=100)


# --- returns and rates ------------------------------------------------------------


def test_log_returns_examples():
    np.testing.assert_array_equal(log_returns(np.full((2, 5), 1.3)), 0.0)
    assert log_returns([[1.0, 2.0]])[0, 0] == pytest.approx(0.693147, abs=1e-6)
    S = np.random.default_rng(0).uniform(0.5, 2.0, size=(3, 30))
    r = log_returns(S)
    assert r.shape == (3, 29)
    for i in range(3):
        for t in range(29):
            assert abs(r[i, t] - math.log(S[i, t + 1] / S[i, t])) <= 1e-15
    with pytest.raises(DataError):
        log_returns([[1.0, 0.0]])
    with pytest.raises(ValueError):
        log_returns([[1.0]])


def test_interpolate_rates_examples():
    days = np.datetime64("2020-01-01") + np.arange(31)
    out = interpolate_rates(days[[0, 30]], [2.5, 2.5], days)
    np.testing.assert_allclose(out, 2.5 / 100 / 365, rtol=1e-15)
    out = interpolate_rates(days[[0, 30]], [0.0, 3.0], days[[15]])
    assert out[0] == pytest.approx(1.5 / 100 / 365, rel=1e-14)


def test_interpolate_rates_irregular_spacing_oracle():
    rng = np.random.default_rng(1)
    rec = np.datetime64("2020-01-01") + np.cumsum(rng.integers(5, 40, size=8))
    vals = rng.normal(1.0, 1.0, size=8)
    targets = np.arange(rec[0], rec[-1] + 1)
    out = interpolate_rates(rec, vals, targets, basis=360.0)
    x = rec.astype(int)
    for d, o in zip(targets.astype(int), out):
        j = min(np.searchsorted(x, d, side="right") - 1, len(x) - 2)
        w = (d - x[j]) / (x[j + 1] - x[j])
        assert abs(o - ((1 - w) * vals[j] + w * vals[j + 1]) / 100 / 360) <= 1e-12


def test_interpolate_rates_refuses_extrapolation():
    days = np.datetime64("2020-01-01") + np.arange(10)
    with pytest.raises(DataError):
        interpolate_rates(days[[2, 8]], [1.0, 1.0], days)
    with pytest.raises(DataError):
        interpolate_rates(days[[2]], [1.0], days[[2]])


def test_carry_adjustment():
    rng = np.random.default_rng(2)
    r, ird = rng.normal(size=(4, 9)), rng.normal(size=(4, 9))
    np.testing.assert_array_equal(carry_adjusted_returns(r, np.zeros_like(r)), r)
    np.testing.assert_array_equal(carry_adjusted_returns(np.zeros_like(r), np.full_like(r, 0.3)), 0.3)
    assert np.abs(carry_adjusted_returns(r, ird) - (r + ird)).max() <= 1e-15
    with pytest.raises(ValueError):
        carry_adjusted_returns(r, ird[:, 1:])


# --- strategy arithmetic ----------------------------------------------------------


def test_risk_parity_examples():
    x = np.array([0.01, -0.02, 0.03, -0.005])
    u, pi = risk_parity_step(x * 7, x, np.ones(4))
    assert pi == pytest.approx(np.abs(x).sum()) and pi > 0
    pred = np.array([1.0, -1.0, 1.0, -1.0])
    _, pi = risk_parity_step(pred, x, np.ones(4))
    assert pi == pytest.approx(0.01 + 0.02 + 0.03 + 0.005, abs=1e-15)
    assert list(trade_signals([0.0, -0.0, -1e-300])) == [1.0, 1.0, -1.0]
    with pytest.raises(ManifoldForecastError):
        risk_parity_step(pred, x, np.array([1.0, 0.0, 1.0, 1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_flipping_signals_negates_portfolio(seed):
    rng = np.random.default_rng(seed)
    p, x, v = rng.normal(size=10), rng.normal(size=10), rng.uniform(0.1, 2, 10)
    p[p == 0] = 1.0
    assert risk_parity_step(-p, x, v)[1] == -risk_parity_step(p, x, v)[1]


def test_sharpe_examples():
    assert sharpe_ratio([0.01, -0.01] * 50) == 0.0
    sh = sharpe_ratio(np.random.default_rng(3).normal(0.001, 0.01, 10_000))
    assert abs(sh - 0.1 * math.sqrt(250)) < 0.2
    with pytest.raises(ManifoldForecastError):
        sharpe_ratio([0.2, 0.2, 0.2])
    with pytest.raises(ValueError):
        sharpe_ratio([0.1])


# --- CSV ingestion ----------------------------------------------------------------


def test_price_csv_errors_report_rows(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("date,pair,close\n2020-01-02,EURUSD,1.1\n2020-01-03,EURUSD,abc\n")
    with pytest.raises(DataError) as err:
        forex.read_prices(p)
    assert err.value.row == 3
    p.write_text("date,pair,close\n2020-01-02,EURUSD,1.1\n2020-01-03,EURUSD,-1\n")
    with pytest.raises(DataError):
        forex.read_prices(p)
    p.write_text("when,pair,close\n")
    with pytest.raises(DataError):
        forex.read_prices(p)


def test_rates_csv_unknown_region(tmp_path):
    r = tmp_path / "r.csv"
    r.write_text("date,region,annual_rate_percent\n2020-01-01,MARS,1.0\n")
    with pytest.raises(DataError) as err:
        forex.read_rates(r)
    assert err.value.row == 2


def test_fixture_dataset_invariants(dataset):
    assert dataset.n_pairs == 10 and np.all(dataset.spot > 0)
    assert np.all(np.diff(dataset.dates) > np.timedelta64(0, "D"))
    assert dataset.rates_foreign.shape == dataset.spot.shape
    assert np.all(np.isfinite(dataset.rates_usa))


def test_bundled_fixture_matches_generator(tmp_path):
    forex.write_fixture(tmp_path / "p.csv", tmp_path / "r.csv")
    bundled = forex.fixture_paths()
    assert (tmp_path / "p.csv").read_bytes() == open(bundled[0], "rb").read()
    assert (tmp_path / "r.csv").read_bytes() == open(bundled[1], "rb").read()


# --- backtest ---------------------------------------------------------------------


def test_random_walk_signals_are_persistence(dataset):
    led = run_backtest(dataset, _variant("RW", model="random_walk"))
    x, _ = dataset.adjusted_returns()
    np.testing.assert_array_equal(led.signals, trade_signals(x[:, led.days].T))


def test_persistence_on_exactly_persistent_days():
    # every return is repeated once, so x[t+1] == x[t] on every even day t
    rng = np.random.default_rng(4)
    x = np.repeat(rng.normal(size=(3, 200)), 2, axis=1)
    cfg = BacktestConfig(PipelineConfig("RW", model="random_walk"), window=50, train_window=50, vol_window=50)
    led = run_backtest(x, cfg)
    rep = led.days % 2 == 0
    expected = np.sum(np.abs(led.returns[rep]) / led.volatilities[rep], axis=1)
    np.testing.assert_allclose(led.portfolio[rep], expected, rtol=1e-15)
    assert np.all(led.portfolio[rep] > 0)


@pytest.mark.parametrize("variant", default_variants(), ids=lambda c: c.name)
def test_variant_audit_and_consistency(dataset, variant):
    led = run_backtest(dataset, variant, audit=True)
    assert led.failures == []
    assert led.portfolio.size == dataset.spot.shape[1] - 1 - 250
    assert led.consistency_error() <= 1e-12
    assert np.isfinite(led.sharpe)


def test_audit_catches_lookahead(dataset, monkeypatch):
    original = forex.forecast_next

    def peeking(x, t, cfg, seed=0):
        return original(x, t, cfg, seed) + x[:, min(t + 1, x.shape[1] - 1)]

    monkeypatch.setattr(forex, "forecast_next", peeking)
    with pytest.raises(forex.CausalityError):
        run_backtest(dataset, _variant("RW", model="random_walk"), audit=True)


def test_persistence_profits_on_momentum_fixture_and_flip_negates(dataset):
    rw = _variant("RW", model="random_walk")
    led = run_backtest(dataset, rw)
    assert led.sharpe > 0
    flipped = run_backtest(dataset, BacktestConfig(rw.strategy, invert_signals=True))
    np.testing.assert_array_equal(flipped.portfolio, -led.portfolio)
    np.testing.assert_array_equal(flipped.signals, -led.signals)


@pytest.mark.parametrize("kw", [dict(model="random_walk"), dict(embedding="dm", lifting="gh"),
                                dict(embedding="pca", lifting="linear")])
def test_scale_equivariance(dataset, kw):
    x, _ = dataset.adjusted_returns()
    cfg = _variant("v", **kw)
    a = run_backtest(x, cfg, last_day=290)
    b = run_backtest(3.0 * x, cfg, last_day=290)
    np.testing.assert_array_equal(a.signals, b.signals)
    np.testing.assert_allclose(b.portfolio, a.portfolio, rtol=1e-12, atol=1e-12)


def test_ledger_reproducible_and_csv(dataset, tmp_path):
    cfg = _variant("DM-MVAR-GH/100", embedding="dm", lifting="gh")
    a, b = run_backtest(dataset, cfg, seed=5), run_backtest(dataset, cfg, seed=5)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "date,pair,signal,adj_return,volatility,portfolio_return"
    assert len(lines) == 1 + 10 * a.portfolio.size
    doc = forex.write_summary([a], tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text()) == doc
    assert doc["variants"]["DM-MVAR-GH/100"]["sharpe"] == a.sharpe


def test_forecast_reads_only_the_past(dataset):
    x, _ = dataset.adjusted_returns()
    cfg = _variant("LLE", embedding="lle", lifting="gh")
    y = forex.forecast_next(x, 260, cfg)
    z = x.copy()
    z[:, 261:] = np.nan
    np.testing.assert_array_equal(forex.forecast_next(z, 260, cfg), y)
    with pytest.raises(ValueError):
        forex.forecast_next(x, 100, cfg)


def test_insufficient_history(dataset):
    x, _ = dataset.adjusted_returns()
    with pytest.raises(DataError):
        run_backtest(x[:, :250], _variant("RW", model="random_walk"))
    assert run_backtest(x[:, :251], _variant("RW", model="random_walk")).portfolio.size == 1


# --- configuration ----------------------------------------------------------------


def test_backtest_config_validation():
    with pytest.raises(ConfigError):
        _variant("x", embedding="dm", lifting="rbf")
    with pytest.raises(ConfigError):
        BacktestConfig(PipelineConfig("x"), train_window=300)
    with pytest.raises(ConfigError):
        BacktestConfig(PipelineConfig("x", order=3), train_window=4)
    cfg = _variant("DM", embedding="dm", lifting="gh")
    assert BacktestConfig.from_dict(cfg.to_dict()) == cfg


def test_variants_from_dict():
    out = variants_from_dict({
        "defaults": {"train_window": 50},
        "variants": [{"name": "RW", "model": "random_walk"}, {"name": "DM", "embedding": "dm", "lifting": "gh"}],
    })
    assert [c.train_window for c in out] == [50, 50] and out[1].strategy.d == 3
    with pytest.raises(ConfigError):
        variants_from_dict({"variants": [{"name": "a"}, {"name": "a"}]})
    with pytest.raises(ConfigError):
        variants_from_dict({"variants": [], "colour": 1})
    with pytest.raises(ConfigError):
        variants_from_dict([])
