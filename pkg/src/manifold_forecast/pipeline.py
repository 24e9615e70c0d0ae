"""Embed-forecast-lift runs, ambient baselines and Monte-Carlo RMSE tables.

A run splits a synthetic panel into a training block and a test block,
optionally embeds the training block, fits a one-step model on the (reduced)
series, iterates it over the whole test horizon, lifts the reduced forecast
back to the ambient space and scores it per variable.

Several configurations evaluated on the same panel share embeddings, fitted
models and lifting operators through a per-run cache, so a table with
twelve rows costs little more than its distinct ingredients.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import numpy as np
import yaml

from . import embedding as emb
from . import lifting as lift
from . import models
from .errors import ConfigError, ManifoldForecastError
from .synthdata import get_generator, split_train_test

log = logging.getLogger(__name__)

EMBEDDINGS = ("none", "dm", "lle", "pca")
MODELS = ("mvar", "gpr", "random_walk")
LIFTINGS = ("identity", "gh", "rbf", "linear")
FAILURE_POLICIES = ("propagate", "raise")

# Exceptions that mark a single run as failed rather than aborting a table.
RUN_FAILURES = (ManifoldForecastError, FloatingPointError, np.linalg.LinAlgError)


@dataclass(frozen=True)
class PipelineConfig:
    """One method combination (one row of an RMSE table).

    ``lifting`` must be ``identity`` exactly when ``embedding`` is ``none``;
    ``linear`` lifting is the PCA reconstruction and requires ``pca``.
    ``horizon=None`` forecasts the whole test block.  ``lle_k=None`` uses as
    many LLE neighbors as there are ambient variables (at least ``d + 1``),
    which keeps the local Gram systems non-singular.  ``model="random_walk"``
    is the naive baseline: every test step is predicted by the previous
    observation.
    """

    name: str
    embedding: str = "none"
    d: int = 2
    model: str = "mvar"
    order: int = 1
    lifting: str = "identity"
    horizon: int = None
    n_train: int = 1500
    diffusion_time: int = 1
    parsimonious: bool = True
    lle_k: int = None
    rbf_k: int = 50
    rbf_p: int = 1
    gh_q: int = None
    gh_delta: float = 1e-6
    gpr_restarts: int = 3
    gpr_max_opt_points: int = 100

    def __post_init__(self):
        def bad(msg):
            raise ConfigError(f"config {self.name!r}: {msg}")

        if self.embedding not in EMBEDDINGS:
            bad(f"embedding must be one of {EMBEDDINGS}, got {self.embedding!r}")
        if self.model not in MODELS:
            bad(f"model must be one of {MODELS}, got {self.model!r}")
        if self.lifting not in LIFTINGS:
            bad(f"lifting must be one of {LIFTINGS}, got {self.lifting!r}")
        if (self.lifting == "identity") != (self.embedding == "none"):
            bad("lifting 'identity' is used exactly when embedding is 'none'")
        if self.lifting == "linear" and self.embedding != "pca":
            bad("linear lifting is only defined for the pca embedding")
        if self.model == "random_walk" and self.embedding != "none":
            bad("the random walk runs in the ambient space")
        for name in ("d", "order", "n_train", "diffusion_time", "lle_k", "rbf_k", "gpr_max_opt_points"):
            value = getattr(self, name)
            if value is None and name == "lle_k":
                continue
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                bad(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.gpr_restarts, (int, np.integer)) or self.gpr_restarts < 0:
            bad(f"gpr_restarts must be a non-negative integer, got {self.gpr_restarts!r}")
        if self.horizon is not None and (int(self.horizon) != self.horizon or self.horizon < 1):
            bad(f"horizon must be a positive integer, got {self.horizon!r}")
        if self.rbf_p < 1 or self.rbf_p % 2 == 0:
            bad(f"rbf_p must be a positive odd integer, got {self.rbf_p!r}")
        if self.gh_q is not None and self.gh_q < 1:
            bad(f"gh_q must be a positive integer, got {self.gh_q!r}")
        if not 0.0 < float(self.gh_delta) < 1.0:
            bad(f"gh_delta must lie in (0, 1), got {self.gh_delta!r}")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "name" not in data:
            raise ConfigError("every config needs a name")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def lle_neighbors(self, n_vars):
        """Neighbor count used by LLE on data with ``n_vars`` ambient variables."""
        return self.lle_k if self.lle_k is not None else max(int(n_vars), self.d + 1)

    # cache keys: configurations agreeing on a key share that stage
    def _embedding_key(self):
        if self.embedding == "none":
            return ("none",)
        if self.embedding == "dm":
            return ("dm", self.d, self.diffusion_time, self.parsimonious)
        if self.embedding == "lle":
            return ("lle", self.d, self.lle_k)
        return ("pca", self.d)

    def _model_key(self):
        key = (self._embedding_key(), self.model, self.order)
        if self.model == "gpr":
            key += (self.gpr_restarts, self.gpr_max_opt_points)
        return key

    def _lift_key(self):
        if self.lifting == "gh":
            return (self._embedding_key(), "gh", self.gh_q, self.gh_delta)
        if self.lifting == "rbf":
            return (self._embedding_key(), "rbf", self.rbf_k, self.rbf_p)
        return (self._embedding_key(), self.lifting)


def rmse(pred, actual):
    """Per-variable root mean squared error over the horizon (rows are variables)."""
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    if pred.ndim != 2 or pred.shape[1] < 1:
        raise ValueError("expected d x H matrices with H >= 1")
    return np.sqrt(np.mean((pred - actual) ** 2, axis=1))


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------


class _Stage:
    """Memoizes a stage result or the exception it raised."""

    def __init__(self):
        self.store = {}

    def get(self, key, build):
        if key not in self.store:
            try:
                self.store[key] = (True, build())
            except RUN_FAILURES as exc:
                self.store[key] = (False, exc)
        ok, value = self.store[key]
        if not ok:
            raise value
        return value


class RunCache:
    """Shared stages for configurations evaluated on the same panel and seed."""

    def __init__(self):
        self.embeddings = _Stage()
        self.forecasts = _Stage()
        self.lifts = _Stage()
        self.split = None


def _embed(cfg, train):
    if cfg.embedding == "none":
        return None, train
    if cfg.embedding == "dm":
        e = emb.dm_embed(train, cfg.d, t=cfg.diffusion_time, parsimonious=cfg.parsimonious)
    elif cfg.embedding == "lle":
        e = emb.lle_embed(train, cfg.d, cfg.lle_neighbors(train.shape[0]))
    else:
        e = emb.pca_embed(train, cfg.d)
    return e, e.coords


def _reduced_forecast(cfg, series, horizon, seed):
    if cfg.model == "mvar":
        fitted = models.fit_mvar(series, cfg.order)
    else:
        fitted = models.fit_gpr_series(
            series,
            cfg.order,
            n_restarts=cfg.gpr_restarts,
            max_opt_points=cfg.gpr_max_opt_points,
            seed=seed,
        )
    return models.iterate_forecast(fitted, series[:, -cfg.order :], horizon).predictions


def _lift_operator(cfg, embedding, coords, train):
    if cfg.lifting == "gh":
        return lift.gh_fit(coords, train, q=cfg.gh_q, delta=cfg.gh_delta)
    if cfg.lifting == "rbf":
        return lift.rbf_fit(coords, train, k=cfg.rbf_k, p=cfg.rbf_p)
    return embedding


def _apply_lift(cfg, op, reduced):
    if cfg.lifting == "identity":
        return reduced
    if cfg.lifting == "gh":
        return lift.gh_extend_batch(op, reduced)
    if cfg.lifting == "rbf":
        return lift.rbf_lift_batch(op, reduced)
    return op.reconstruct(reduced)


def run_pipeline(panel, cfg, seed, cache=None):
    """Run one configuration on one panel.

    Parameters
    ----------
    panel : TimeSeriesPanel
        Training block followed by the test block.
    cfg : PipelineConfig
    seed : int
        Seed for stochastic model fitting (GPR restarts).
    cache : RunCache, optional
        Share stages with other configurations on the same panel and seed.

    Returns
    -------
    predictions : ndarray, shape (D, H)
    scores : ndarray, shape (D,)
        Per-variable RMSE against the first ``H`` test columns.
    """
    cache = cache if cache is not None else RunCache()
    train_panel, test_panel = split_train_test(panel, cfg.n_train)
    train, test = train_panel.values, test_panel.values
    horizon = test.shape[1] if cfg.horizon is None else int(cfg.horizon)
    if horizon > test.shape[1]:
        raise ConfigError(f"horizon {horizon} exceeds the {test.shape[1]} test columns")

    if cfg.model == "random_walk":
        # naive baseline: every test step is predicted by the previous observation
        predictions = models.naive_one_step_forecast(train[:, -1], test[:, :horizon]).predictions
        return predictions, rmse(predictions, test[:, :horizon])

    ekey = (cfg._embedding_key(), cfg.n_train)
    embedding, coords = cache.embeddings.get(ekey, lambda: _embed(cfg, train))
    mkey = (cfg._model_key(), cfg.n_train, horizon, seed)
    reduced = cache.forecasts.get(mkey, lambda: _reduced_forecast(cfg, coords, horizon, seed))
    lkey = (cfg._lift_key(), cfg.n_train)
    op = cache.lifts.get(lkey, lambda: _lift_operator(cfg, embedding, coords, train))
    predictions = _apply_lift(cfg, op, reduced)
    if not np.all(np.isfinite(predictions)):
        raise FloatingPointError("lifted forecast contains non-finite values")
    return predictions, rmse(predictions, test[:, :horizon])


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RowStats:
    name: str
    median: np.ndarray
    p5: np.ndarray
    p95: np.ndarray
    failures: int
    n_success: int


@dataclass(frozen=True)
class RmseTable:
    """Per-combination, per-variable median and 5th/95th percentiles of RMSE.

    ``samples[name]`` keeps the raw ``n_runs x D`` RMSE values with NaN rows
    for failed runs; ``errors[name]`` lists ``(run, message)`` pairs.
    """

    rows: tuple
    variable_names: tuple
    n_runs: int
    samples: dict = field(default_factory=dict, compare=False)
    errors: dict = field(default_factory=dict, compare=False)

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def total_failures(self):
        return sum(r.failures for r in self.rows)

    def to_csv(self, path):
        """CSV with columns combination, variable, median, p5, p95, failures."""
        with open(path, "w", newline="") as fh:
            fh.write("combination,variable,median,p5,p95,failures\n")
            for r in self.rows:
                for j, var in enumerate(self.variable_names):
                    vals = [_fmt(r.median[j]), _fmt(r.p5[j]), _fmt(r.p95[j])]
                    fh.write(f"{_csv_field(r.name)},{var},{','.join(vals)},{r.failures}\n")

    def to_text(self, digits=3):
        """Aligned table: median on one line, (p5, p95) underneath."""
        head = ["Model/Variable", *self.variable_names]
        lines = []
        body = []
        for r in self.rows:
            body.append([r.name + (f" [{r.failures} failed]" if r.failures else "")]
                        + [_fmt_short(v, digits) for v in r.median])
            body.append([""] + [f"({_fmt_short(a, digits)},{_fmt_short(b, digits)})" for a, b in zip(r.p5, r.p95)])
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
        lines.append(fmt(head))
        lines.append("-" * len(lines[0]))
        for i, row in enumerate(body):
            lines.append(fmt(row))
            if i % 2 == 1:
                lines.append("")
        lines.append(f"runs per combination: {self.n_runs}; percentiles by linear interpolation")
        return "\n".join(lines).rstrip() + "\n"


def _fmt(x):
    return "nan" if not np.isfinite(x) else repr(float(x))


def _fmt_short(x, digits):
    return "nan" if not np.isfinite(x) else f"{x:.{digits}f}"


def _csv_field(text):
    return f'"{text}"' if any(c in text for c in ',"\n') else text


def summarize(samples, n_runs):
    """Median/p5/p95 over the successful runs (rows without NaN)."""
    ok = np.all(np.isfinite(samples), axis=1)
    good = np.sort(samples[ok], axis=0)
    if good.shape[0] == 0:
        nan = np.full(samples.shape[1], np.nan)
        return nan, nan.copy(), nan.copy(), n_runs, 0
    p5, med, p95 = np.percentile(good, [5, 50, 95], axis=0, method="linear")
    return med, p5, p95, int(n_runs - good.shape[0]), int(good.shape[0])


def _one_run(args):
    configs, generator, n_obs, seed, failure_policy = args
    panel = get_generator(generator)(n_obs, seed)
    cache = RunCache()
    out = {}
    for cfg in configs:
        try:
            _, scores = run_pipeline(panel, cfg, seed, cache)
            out[cfg.name] = (scores, None)
        except RUN_FAILURES as exc:
            if failure_policy == "raise":
                raise
            log.info("run seed=%d config=%s failed: %s", seed, cfg.name, exc)
            out[cfg.name] = (None, f"{type(exc).__name__}: {exc}")
    return panel.variable_names, out


def monte_carlo(configs, generator, n_runs, base_seed=0, n_obs=None, failure_policy="propagate",
                jobs=1, progress=None):
    """Repeat every configuration over ``n_runs`` independent panels.

    Parameters
    ----------
    configs : sequence of PipelineConfig
        Names must be unique.
    generator : str
        ``linear``, ``nonlinear`` or ``linear_lag3``.
    n_runs : int
    base_seed : int
        Run ``r`` draws its panel (and GPR restarts) from ``base_seed + r``.
    n_obs : int, optional
        Panel length; defaults to the training length plus 500 test steps.
    failure_policy : {"propagate", "raise"}
        ``propagate`` records failed runs and computes percentiles over the
        successful ones; ``raise`` aborts on the first failure.
    jobs : int
        Worker processes; results do not depend on it.
    progress : callable, optional
        Called with the number of completed runs.
    """
    configs = list(configs)
    if not configs:
        raise ConfigError("no configurations given")
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError("configuration names must be unique")
    if int(n_runs) != n_runs or n_runs < 1:
        raise ConfigError(f"n_runs must be a positive integer, got {n_runs}")
    if failure_policy not in FAILURE_POLICIES:
        raise ConfigError(f"failure_policy must be one of {FAILURE_POLICIES}")
    get_generator(generator)
    n_runs = int(n_runs)
    if n_obs is None:
        n_obs = max(c.n_train for c in configs) + 500
    tasks = [(configs, generator, int(n_obs), int(base_seed) + r, failure_policy) for r in range(n_runs)]

    results = []
    if jobs is None or jobs <= 1:
        for i, task in enumerate(tasks):
            results.append(_one_run(task))
            if progress:
                progress(i + 1)
    else:
        with ProcessPoolExecutor(max_workers=int(jobs)) as pool:
            for i, res in enumerate(pool.map(_one_run, tasks)):
                results.append(res)
                if progress:
                    progress(i + 1)

    variable_names = results[0][0]
    dim = len(variable_names)
    samples, errors, rows = {}, {}, []
    for cfg in configs:
        block = np.full((n_runs, dim), np.nan)
        errs = []
        for r, (_, out) in enumerate(results):
            scores, err = out[cfg.name]
            if err is None:
                block[r] = scores
            else:
                errs.append((int(base_seed) + r, err))
        med, p5, p95, failures, n_ok = summarize(block, n_runs)
        rows.append(RowStats(cfg.name, med, p5, p95, failures, n_ok))
        samples[cfg.name] = block
        errors[cfg.name] = errs
    return RmseTable(tuple(rows), tuple(variable_names), n_runs, samples, errors)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Experiment:
    """A generator, a set of configurations and Monte-Carlo settings."""

    name: str
    generator: str
    configs: tuple
    n_runs: int = 100
    base_seed: int = 0
    n_obs: int = None


def experiment_from_dict(data, name=None):
    if not isinstance(data, dict):
        raise ConfigError("experiment file must hold a mapping")
    allowed = {"name", "generator", "n_runs", "base_seed", "n_obs", "defaults", "configs"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
    if "generator" not in data or "configs" not in data:
        raise ConfigError("experiment needs 'generator' and 'configs'")
    try:
        get_generator(data["generator"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    defaults = data.get("defaults") or {}
    raw = data["configs"]
    if not isinstance(raw, list) or not raw:
        raise ConfigError("'configs' must be a non-empty list")
    configs = []
    for entry in raw:
        if not isinstance(entry, dict):
            raise ConfigError("each config must be a mapping")
        try:
            configs.append(PipelineConfig.from_dict({**defaults, **entry}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    return Experiment(
        name=data.get("name", name or "custom"),
        generator=data["generator"],
        configs=tuple(configs),
        n_runs=int(data.get("n_runs", 100)),
        base_seed=int(data.get("base_seed", 0)),
        n_obs=data.get("n_obs"),
    )


def load_experiment(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return experiment_from_dict(data, name=str(path))


PRESETS = ("table1", "table2", "table3")


def load_preset(name):
    """Bundled experiment definitions reproducing the three synthetic tables."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("manifold_forecast").joinpath("presets").joinpath(f"{name}.yaml").read_text()
    return experiment_from_dict(yaml.safe_load(text), name=name)


def run_experiment(experiment, n_runs=None, base_seed=None, jobs=1, failure_policy="propagate",
                   progress=None):
    return monte_carlo(
        experiment.configs,
        experiment.generator,
        experiment.n_runs if n_runs is None else n_runs,
        experiment.base_seed if base_seed is None else base_seed,
        n_obs=experiment.n_obs,
        failure_policy=failure_policy,
        jobs=jobs,
        progress=progress,
    )
