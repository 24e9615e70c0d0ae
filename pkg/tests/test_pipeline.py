import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from manifold_forecast import lifting, models, pipeline
from manifold_forecast.embedding import dm_embed
from manifold_forecast.errors import ConfigError, IllConditionedError
from manifold_forecast.pipeline import (
    PipelineConfig,
    RunCache,
    experiment_from_dict,
    load_preset,
    monte_carlo,
    rmse,
    run_pipeline,
    summarize,
)
from manifold_forecast.synthdata import gen_linear5, split_train_test

SMALL = dict(n_train=300)


# --- RMSE -------------------------------------------------------------------------


def test_rmse_examples():
    a = np.random.default_rng(0).normal(size=(3, 40))
    np.testing.assert_array_equal(rmse(a, a), 0.0)
    for h in (1, 7, 500):
        np.testing.assert_allclose(rmse(np.ones((2, h)), np.zeros((2, h))), 1.0)
    r = rmse(np.random.default_rng(1).normal(size=(200, 500)), np.zeros((200, 500)))
    assert np.mean((r >= 0.9) & (r <= 1.1)) > 0.99
    with pytest.raises(ValueError):
        rmse(np.zeros((2, 3)), np.zeros((2, 4)))


# --- configuration ----------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        dict(embedding="dm", lifting="identity"),
        dict(embedding="none", lifting="gh"),
        dict(embedding="dm", lifting="linear"),
        dict(embedding="dm", lifting="gh", model="random_walk"),
        dict(embedding="bogus"),
        dict(d=0),
        dict(rbf_p=2),
        dict(horizon=0),
        dict(lle_k=0),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        PipelineConfig("x", **kw)


def test_config_dict_round_trip_and_unknown_keys():
    cfg = PipelineConfig("DM-GPR-GH", embedding="dm", model="gpr", lifting="gh", d=3)
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"name": "x", "colour": "red"})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"embedding": "dm"})


def test_lle_neighbors_default_follows_ambient_dimension():
    cfg = PipelineConfig("x", embedding="lle", lifting="gh", d=3)
    assert cfg.lle_neighbors(5) == 5 and cfg.lle_neighbors(10) == 10 and cfg.lle_neighbors(2) == 4
    assert PipelineConfig("x", embedding="lle", lifting="gh", lle_k=12).lle_neighbors(5) == 12


# --- single runs ------------------------------------------------------------------


def test_random_walk_delegates():
    panel = gen_linear5(400, 3)
    cfg = PipelineConfig("RW", model="random_walk", **SMALL)
    pred, score = run_pipeline(panel, cfg, 3)
    train, test = split_train_test(panel, 300)
    expected = models.naive_one_step_forecast(train.values[:, -1], test.values).predictions
    np.testing.assert_array_equal(pred, expected)
    np.testing.assert_array_equal(pred[:, 0], models.random_walk_forecast(train.values[:, -1], 1).predictions[:, 0])
    np.testing.assert_array_equal(score, rmse(expected, test.values))


def test_dm_mvar_gh_equals_manual_composition():
    panel = gen_linear5(400, 4)
    cfg = PipelineConfig("DM-MVAR-GH", embedding="dm", lifting="gh", **SMALL)
    pred, score = run_pipeline(panel, cfg, 4)
    train, test = split_train_test(panel, 300)
    e = dm_embed(train.values, 2, parsimonious=True)
    fit = models.fit_mvar(e.coords, 1)
    reduced = models.iterate_forecast(fit, e.coords[:, -1:], 100).predictions
    manual = lifting.gh_extend_batch(lifting.gh_fit(e.coords, train.values), reduced)
    np.testing.assert_array_equal(pred, manual)
    np.testing.assert_array_equal(score, rmse(manual, test.values))


def test_pca_linear_lift_and_horizon():
    panel = gen_linear5(400, 5)
    cfg = PipelineConfig("PCA", embedding="pca", lifting="linear", d=5, horizon=20, **SMALL)
    pred, _ = run_pipeline(panel, cfg, 5)
    ambient, _ = run_pipeline(panel, PipelineConfig("MVAR", horizon=20, **SMALL), 5)
    # a full-rank PCA is an invertible affine change of variables for MVAR
    np.testing.assert_allclose(pred, ambient, atol=1e-10)
    with pytest.raises(ConfigError):
        run_pipeline(panel, PipelineConfig("MVAR", horizon=101, **SMALL), 5)


def test_shared_cache_does_not_change_results():
    panel = gen_linear5(400, 6)
    cfgs = [
        PipelineConfig("DM-MVAR-GH", embedding="dm", lifting="gh", **SMALL),
        PipelineConfig("DM-MVAR-RBF", embedding="dm", lifting="rbf", **SMALL),
        PipelineConfig("LLE-MVAR-GH", embedding="lle", lifting="gh", **SMALL),
    ]
    cache = RunCache()
    for cfg in cfgs:
        shared = run_pipeline(panel, cfg, 6, cache)[0]
        alone = run_pipeline(panel, cfg, 6)[0]
        np.testing.assert_array_equal(shared, alone)


# --- Monte Carlo ------------------------------------------------------------------

CFGS = [
    PipelineConfig("Random Walk", model="random_walk", **SMALL),
    PipelineConfig("MVAR(OS)", **SMALL),
    PipelineConfig("DM-MVAR-GH", embedding="dm", lifting="gh", **SMALL),
]


def test_single_run_percentiles_degenerate():
    table = monte_carlo(CFGS, "linear", 1, base_seed=7)
    for row in table.rows:
        np.testing.assert_array_equal(row.median, row.p5)
        np.testing.assert_array_equal(row.median, row.p95)


def test_monte_carlo_seed_rule_and_determinism(tmp_path):
    a = monte_carlo(CFGS, "linear", 3, base_seed=10)
    b = monte_carlo(CFGS, "linear", 3, base_seed=10)
    for name in a.samples:
        np.testing.assert_array_equal(a.samples[name], b.samples[name])
    # run r uses seed base_seed + r
    single = monte_carlo(CFGS, "linear", 1, base_seed=12)
    for name in a.samples:
        np.testing.assert_array_equal(a.samples[name][2], single.samples[name][0])
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_parallel_jobs_match_serial():
    a = monte_carlo(CFGS[:2], "nonlinear", 3, base_seed=2)
    b = monte_carlo(CFGS[:2], "nonlinear", 3, base_seed=2, jobs=2)
    for name in a.samples:
        np.testing.assert_array_equal(a.samples[name], b.samples[name])


def test_failed_runs_are_counted_and_excluded(monkeypatch):
    original = pipeline._apply_lift
    calls = {"n": 0}

    def flaky(cfg, op, reduced):
        if cfg.lifting == "rbf":
            calls["n"] += 1
            if calls["n"] % 2 == 0:
                raise IllConditionedError(1e14)
        return original(cfg, op, reduced)

    monkeypatch.setattr(pipeline, "_apply_lift", flaky)
    cfgs = CFGS[:2] + [PipelineConfig("DM-MVAR-RBF", embedding="dm", lifting="rbf", **SMALL)]
    table = monte_carlo(cfgs, "linear", 4, base_seed=0)
    row = table.row("DM-MVAR-RBF")
    assert row.failures == 2 and row.n_success == 2
    assert table.total_failures == 2 and len(table.errors["DM-MVAR-RBF"]) == 2
    ok = table.samples["DM-MVAR-RBF"][~np.isnan(table.samples["DM-MVAR-RBF"][:, 0])]
    np.testing.assert_allclose(row.median, np.median(ok, axis=0))
    assert "[2 failed]" in table.to_text()
    calls["n"] = 0
    with pytest.raises(IllConditionedError):
        monte_carlo(cfgs, "linear", 4, base_seed=0, failure_policy="raise")


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 40), st.integers(1, 5)), elements=st.floats(0, 10)))
def test_percentile_ordering(samples):
    med, p5, p95, failures, n_ok = summarize(samples, samples.shape[0])
    assert np.all(p5 <= med) and np.all(med <= p95)
    assert failures == 0 and n_ok == samples.shape[0]


def test_summarize_is_order_independent():
    s = np.random.default_rng(0).random((30, 3))
    a = summarize(s, 30)
    b = summarize(s[::-1].copy(), 30)
    for x, y in zip(a[:3], b[:3]):
        np.testing.assert_array_equal(x, y)


def test_monte_carlo_argument_errors():
    with pytest.raises(ConfigError):
        monte_carlo(CFGS, "linear", 0)
    with pytest.raises(ConfigError):
        monte_carlo(CFGS + CFGS[:1], "linear", 1)
    with pytest.raises(ConfigError):
        monte_carlo(CFGS, "linear", 1, failure_policy="ignore")
    with pytest.raises(ValueError):
        monte_carlo(CFGS, "quadratic", 1)


def test_csv_layout(tmp_path):
    table = monte_carlo(CFGS, "linear", 2)
    table.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "combination,variable,median,p5,p95,failures"
    assert len(lines) == 1 + 3 * 5
    name, var, med, p5, p95, fails = lines[1].split(",")
    assert (name, var, fails) == ("Random Walk", "y1", "0")
    assert float(p5) <= float(med) <= float(p95)


# --- presets and experiment files -------------------------------------------------


@pytest.mark.parametrize("name, generator, n_cfg", [("table1", "linear", 11), ("table2", "nonlinear", 11),
                                                    ("table3", "linear_lag3", 7)])
def test_presets_load(name, generator, n_cfg):
    e = load_preset(name)
    assert e.generator == generator and len(e.configs) == n_cfg and e.n_runs == 100


def test_unknown_preset_and_bad_experiment():
    with pytest.raises(ConfigError):
        load_preset("table9")
    with pytest.raises(ConfigError):
        experiment_from_dict({"generator": "linear"})
    with pytest.raises(ConfigError):
        experiment_from_dict({"generator": "linear", "configs": [{"name": "x", "model": "arima"}]})
    with pytest.raises(ConfigError):
        experiment_from_dict({"generator": "linear", "configs": [{"name": "x"}], "extra": 1})


def test_defaults_apply_and_entries_override():
    e = experiment_from_dict({
        "generator": "linear",
        "defaults": {"n_train": 400, "d": 3},
        "configs": [{"name": "a"}, {"name": "b", "d": 2, "embedding": "dm", "lifting": "gh"}],
    })
    assert [c.n_train for c in e.configs] == [400, 400]
    assert [c.d for c in e.configs] == [3, 2]
