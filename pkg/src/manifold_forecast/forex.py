"""FX data ingestion, carry-adjusted returns and the rolling risk-parity backtest.

Input files
-----------
prices CSV
    ``date,pair,close`` with ISO-8601 dates and one row per (date, pair).
    Pairs are written ``XXXUSD`` and quoted as US dollars per unit of the
    foreign currency ``XXX``, so holding the pair earns the foreign rate
    and pays the US rate.
rates CSV
    ``date,region,annual_rate_percent``; sparse (e.g. monthly) records that
    are linearly interpolated in calendar days onto the price dates.

Day ``t`` below indexes the carry-adjusted return matrix, whose column ``t``
is the return realized on price date ``t + 1``.
"""

import csv
import datetime as dt
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import embedding as emb
from . import lifting as lift
from . import models
from .errors import ConfigError, DataError, ManifoldForecastError
from .pipeline import PipelineConfig, RUN_FAILURES

log = logging.getLogger(__name__)

REGIONS = ("USA", "EUR", "GBP", "AUD", "NZD", "JPY", "CAD", "CHF", "SEK", "NOK", "DKK")
FOREIGN = REGIONS[1:]
TRADING_DAYS = 250


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _parse_date(text, row):
    try:
        return np.datetime64(dt.date.fromisoformat(text.strip()), "D")
    except ValueError:
        raise DataError(f"invalid ISO-8601 date {text!r}", row=row) from None


def _parse_float(text, row, what):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"invalid {what} {text!r}", row=row) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite {what}", row=row)
    return value


def _rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != list(header):
            raise DataError(f"header must be {','.join(header)}", row=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", row=lineno)
            yield lineno, row


def pair_region(pair):
    """Foreign region of an ``XXXUSD`` pair."""
    if len(pair) != 6 or not pair.endswith("USD") or pair[:3] not in FOREIGN:
        raise ValueError(f"pair {pair!r} must be XXXUSD with XXX in {FOREIGN}")
    return pair[:3]


def read_prices(path):
    """Dates (sorted), pair names (first-seen order) and the ``pairs x dates`` close matrix."""
    table = {}
    pairs = []
    for lineno, (date_s, pair, close_s) in _rows(path, ("date", "pair", "close")):
        date = _parse_date(date_s, lineno)
        pair = pair.strip()
        try:
            pair_region(pair)
        except ValueError as exc:
            raise DataError(str(exc), row=lineno) from None
        close = _parse_float(close_s, lineno, "close price")
        if close <= 0:
            raise DataError(f"non-positive price {close}", row=lineno)
        if (date, pair) in table:
            raise DataError(f"duplicate row for {pair} on {date}", row=lineno)
        if pair not in pairs:
            pairs.append(pair)
        table[(date, pair)] = close
    if not table:
        raise DataError("price file has no data rows", row=2)
    dates = np.array(sorted({d for d, _ in table}))
    spot = np.empty((len(pairs), len(dates)))
    for j, date in enumerate(dates):
        for i, pair in enumerate(pairs):
            if (date, pair) not in table:
                raise DataError(f"missing price for {pair} on {date}")
            spot[i, j] = table[(date, pair)]
    return dates, tuple(pairs), spot


def read_rates(path):
    """Mapping region -> (record dates, annual percent), each sorted by date."""
    records = {}
    for lineno, (date_s, region, rate_s) in _rows(path, ("date", "region", "annual_rate_percent")):
        region = region.strip()
        if region not in REGIONS:
            raise DataError(f"unknown region {region!r}", row=lineno)
        date = _parse_date(date_s, lineno)
        rate = _parse_float(rate_s, lineno, "rate")
        bucket = records.setdefault(region, {})
        if date in bucket:
            raise DataError(f"duplicate {region} record on {date}", row=lineno)
        bucket[date] = rate
    out = {}
    for region, bucket in records.items():
        dates = np.array(sorted(bucket))
        out[region] = (dates, np.array([bucket[d] for d in dates]))
    return out


def interpolate_rates(record_dates, annual_percent, target_dates, basis=365.0):
    """Daily rate fractions on ``target_dates`` by linear interpolation in calendar days.

    Raises :class:`DataError` for targets outside the record span (no
    extrapolation) or fewer than two records.
    """
    record_dates = np.asarray(record_dates, dtype="datetime64[D]")
    values = np.asarray(annual_percent, dtype=float)
    target = np.asarray(target_dates, dtype="datetime64[D]")
    if record_dates.shape[0] < 2:
        raise DataError("at least two rate records are needed for interpolation")
    order = np.argsort(record_dates, kind="stable")
    xp = record_dates[order].astype(np.int64).astype(float)
    fp = values[order]
    if np.any(np.diff(xp) <= 0):
        raise DataError("rate record dates must be distinct")
    x = target.astype(np.int64).astype(float)
    if x.min() < xp[0] or x.max() > xp[-1]:
        raise DataError(
            f"price dates {target.min()}..{target.max()} fall outside the rate records "
            f"{record_dates.min()}..{record_dates.max()}"
        )
    return np.interp(x, xp, fp) / 100.0 / basis


@dataclass(frozen=True)
class FxDataset:
    """Aligned spot prices and daily rate fractions.

    ``spot`` is ``pairs x T``; ``rates_usa`` has length ``T`` and
    ``rates_foreign`` is ``pairs x T``.
    """

    dates: np.ndarray
    pairs: tuple
    spot: np.ndarray
    rates_usa: np.ndarray
    rates_foreign: np.ndarray

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        if np.any(np.diff(dates) <= np.timedelta64(0, "D")):
            raise DataError("dates must be strictly increasing")
        spot = np.asarray(self.spot, dtype=float)
        if np.any(~(spot > 0)):
            raise DataError("prices must be strictly positive")
        if spot.shape != (len(self.pairs), len(dates)):
            raise DataError("spot matrix does not match pairs x dates")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "spot", spot)

    @property
    def n_pairs(self):
        return self.spot.shape[0]

    def adjusted_returns(self):
        """Carry-adjusted returns ``x`` (``pairs x (T-1)``) and their dates ``dates[1:]``."""
        r = log_returns(self.spot)
        ird = self.rates_foreign[:, 1:] - self.rates_usa[None, 1:]
        return carry_adjusted_returns(r, ird), self.dates[1:]


def load_dataset(prices_path, rates_path, basis=365.0):
    dates, pairs, spot = read_prices(prices_path)
    records = read_rates(rates_path)
    needed = ["USA"] + [pair_region(p) for p in pairs]
    missing = [r for r in needed if r not in records]
    if missing:
        raise DataError(f"rates file has no records for {missing}")
    usa = interpolate_rates(*records["USA"], dates, basis)
    foreign = np.vstack([interpolate_rates(*records[pair_region(p)], dates, basis) for p in pairs])
    return FxDataset(dates, pairs, spot, usa, foreign)


def log_returns(spot):
    """``log(S_t / S_{t-1})`` along the columns; ``T - 1`` columns."""
    spot = np.atleast_2d(np.asarray(spot, dtype=float))
    if spot.shape[1] < 2:
        raise ValueError("need at least two price dates")
    if np.any(~(spot > 0)):
        raise DataError("prices must be strictly positive")
    return np.log(spot[:, 1:] / spot[:, :-1])


def carry_adjusted_returns(r, ird):
    """Elementwise ``x = r + IRD``."""
    r = np.asarray(r, dtype=float)
    ird = np.asarray(ird, dtype=float)
    if r.shape != ird.shape:
        raise ValueError(f"returns {r.shape} and rate differentials {ird.shape} are misaligned")
    return r + ird


# ---------------------------------------------------------------------------
# Strategy arithmetic
# ---------------------------------------------------------------------------


def trade_signals(predictions):
    """+1 for a non-negative predicted return, -1 otherwise."""
    return np.where(np.asarray(predictions, dtype=float) >= 0.0, 1.0, -1.0)


def risk_parity_step(predictions, realized, vol):
    """Signals and the inverse-volatility weighted portfolio return ``sum u x / sigma``."""
    predictions = np.asarray(predictions, dtype=float)
    realized = np.asarray(realized, dtype=float)
    vol = np.asarray(vol, dtype=float)
    if not predictions.shape == realized.shape == vol.shape:
        raise ValueError("predictions, realized returns and volatilities must align")
    if np.any(~(vol > 0)):
        raise ManifoldForecastError("volatility must be strictly positive")
    u = trade_signals(predictions)
    return u, float(np.sum(u * realized / vol))


def sharpe_ratio(daily_returns, periods=TRADING_DAYS):
    """Annualized Sharpe ratio ``mean / std * sqrt(periods)`` (zero risk-free rate, ddof=1)."""
    x = np.asarray(daily_returns, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two daily returns")
    sd = x.std(ddof=1)
    if not sd > 0 or np.all(x == x[0]):  # constant input can leave a round-off std
        raise ManifoldForecastError("portfolio returns have zero variance")
    return float(x.mean() / sd * math.sqrt(periods))


# ---------------------------------------------------------------------------
# Backtest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BacktestConfig:
    """One strategy variant of the rolling backtest.

    ``strategy`` selects embedding / model / lifting as for the synthetic
    experiments; its ``d``, ``order`` and GPR settings are used, its
    ``n_train`` and ``horizon`` are ignored.  ``window`` days are embedded,
    the reduced model is trained on the last ``train_window`` of them and
    ``vol_window`` days give the trailing volatility.
    """

    strategy: PipelineConfig
    window: int = 250
    train_window: int = 100
    vol_window: int = 250
    standardize: bool = True
    invert_signals: bool = False

    def __post_init__(self):
        name = self.strategy.name
        if self.strategy.lifting == "rbf":
            raise ConfigError(f"{name}: the backtest lifts with gh, linear or identity")
        for key in ("window", "train_window", "vol_window"):
            value = getattr(self, key)
            if int(value) != value or value < 2:
                raise ConfigError(f"{name}: {key} must be an integer >= 2")
        if self.train_window > self.window:
            raise ConfigError(f"{name}: train_window exceeds window")
        if self.strategy.model != "random_walk" and self.train_window <= self.strategy.order + 1:
            raise ConfigError(f"{name}: train_window too short for the model order")

    @property
    def name(self):
        return self.strategy.name

    @property
    def first_day(self):
        """First return index with a full embedding window and volatility window."""
        return max(self.window, self.vol_window) - 1

    def to_dict(self):
        out = asdict(self)
        out["strategy"] = self.strategy.to_dict()
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        extra = {k: data.pop(k) for k in ("window", "train_window", "vol_window", "standardize", "invert_signals")
                 if k in data}
        if "strategy" in data:
            strategy = data.pop("strategy")
            if data:
                raise ConfigError(f"unknown backtest keys: {sorted(data)}")
        else:
            strategy = data
        strategy = dict(strategy)
        strategy.setdefault("d", 3)
        try:
            return cls(PipelineConfig.from_dict(strategy), **extra)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _fit_predict(series, cfg, seed):
    """One-step forecast of a ``k x n`` series under ``cfg.strategy``'s model."""
    s = cfg.strategy
    if s.model == "random_walk":
        return series[:, -1].copy()
    if s.model == "mvar":
        fitted = models.fit_mvar(series, s.order)
    else:
        fitted = models.fit_gpr_series(
            series, s.order, n_restarts=s.gpr_restarts, max_opt_points=s.gpr_max_opt_points, seed=seed
        )
    y, _ = models.one_step(fitted, series[:, -s.order :])
    return y


def forecast_next(x, t, cfg, seed=0):
    """Predicted carry-adjusted returns for day ``t + 1`` from ``x[:, :t + 1]`` only.

    Parameters
    ----------
    x : ndarray, shape (pairs, days)
        Full return matrix; columns after ``t`` are never read.
    t : int
        Current day, ``t >= cfg.window - 1``.
    """
    s = cfg.strategy
    if t < cfg.window - 1:
        raise ValueError(f"day {t} has fewer than {cfg.window} days of history")
    W = np.array(x[:, t - cfg.window + 1 : t + 1], dtype=float)
    if s.model == "random_walk":
        return W[:, -1]
    if cfg.standardize:
        mu = W.mean(axis=1, keepdims=True)
        sd = W.std(axis=1, keepdims=True)
        sd[sd == 0] = 1.0
    else:
        mu, sd = np.zeros((W.shape[0], 1)), np.ones((W.shape[0], 1))
    Ws = (W - mu) / sd
    if s.embedding == "none":
        yhat = _fit_predict(Ws[:, -cfg.train_window :], cfg, seed)
    else:
        if s.embedding == "dm":
            e = emb.dm_embed(Ws, s.d, t=s.diffusion_time, parsimonious=s.parsimonious)
        elif s.embedding == "lle":
            e = emb.lle_embed(Ws, s.d, s.lle_neighbors(Ws.shape[0]))
        else:
            e = emb.pca_embed(Ws, s.d)
        coords = e.coords
        reduced = _fit_predict(coords[:, -cfg.train_window :], cfg, seed)
        if s.lifting == "linear":
            yhat = e.reconstruct(reduced)
        else:
            op = lift.gh_fit(coords, Ws, q=s.gh_q, delta=s.gh_delta)
            yhat = lift.gh_extend(op, reduced)
    return yhat * sd[:, 0] + mu[:, 0]


def trailing_volatility(x, t, window):
    """Sample std (ddof=1) of each row over days ``t - window + 1 .. t``."""
    if t < window - 1:
        raise ValueError(f"day {t} has fewer than {window} days of history")
    return np.asarray(x[:, t - window + 1 : t + 1], dtype=float).std(axis=1, ddof=1)


@dataclass(frozen=True)
class BacktestLedger:
    """Daily records of one strategy variant.

    Row ``k`` refers to decision day ``days[k]``: ``signals`` and
    ``volatilities`` are known at that day, ``returns`` and ``portfolio`` are
    realized on ``dates[k]`` (the next trading day).
    """

    name: str
    pairs: tuple
    days: np.ndarray
    dates: np.ndarray
    predictions: np.ndarray
    signals: np.ndarray
    returns: np.ndarray
    volatilities: np.ndarray
    portfolio: np.ndarray
    sharpe: float
    config: dict
    failures: list = field(default_factory=list)

    def recompute_portfolio(self):
        return np.sum(self.signals * self.returns / self.volatilities, axis=1)

    def consistency_error(self):
        """Largest gap between stored and recomputed portfolio returns."""
        if self.portfolio.size == 0:
            return 0.0
        return float(np.max(np.abs(self.recompute_portfolio() - self.portfolio)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("date,pair,signal,adj_return,volatility,portfolio_return\n")
            for k, date in enumerate(self.dates):
                for i, pair in enumerate(self.pairs):
                    fh.write(
                        f"{date},{pair},{int(self.signals[k, i])},{self.returns[k, i]!r},"
                        f"{self.volatilities[k, i]!r},{self.portfolio[k]!r}\n"
                    )

    def summary(self):
        return {
            "sharpe": self.sharpe,
            "n_days": int(self.portfolio.size),
            "failures": len(self.failures),
            "config": self.config,
        }


class CausalityError(ManifoldForecastError):
    """A daily decision changed when future data were hidden."""


def run_backtest(data, cfg, seed=0, audit=False, first_day=None, last_day=None):
    """Rolling one-day-ahead backtest of one strategy variant.

    Parameters
    ----------
    data : FxDataset or ndarray
        Dataset, or a ready ``pairs x days`` carry-adjusted return matrix.
    cfg : BacktestConfig
    seed : int
        Base seed for stochastic fits; day ``t`` uses ``seed + t``.
    audit : bool
        Recompute every decision with all data after day ``t`` zeroed and
        raise :class:`CausalityError` if any signal differs.
    first_day, last_day : int, optional
        Restrict the decision days (defaults: first full window, second to
        last return).
    """
    if isinstance(data, FxDataset):
        x, ret_dates = data.adjusted_returns()
        pairs = data.pairs
    else:
        x = np.asarray(data, dtype=float)
        ret_dates = np.arange(x.shape[1])
        pairs = tuple(f"P{i}" for i in range(x.shape[0]))
    n_days = x.shape[1]
    start = cfg.first_day if first_day is None else max(int(first_day), cfg.first_day)
    stop = n_days - 2 if last_day is None else min(int(last_day), n_days - 2)
    if stop < start:
        raise DataError(f"need more than {cfg.first_day + 2} return days, got {n_days}")

    days, preds, sig, rets, vols, port, failures = [], [], [], [], [], [], []
    for t in range(start, stop + 1):
        try:
            pred = forecast_next(x, t, cfg, seed + t)
            if not np.all(np.isfinite(pred)):
                raise FloatingPointError("non-finite forecast")
        except RUN_FAILURES as exc:
            log.info("%s: day %d failed: %s", cfg.name, t, exc)
            failures.append((int(t), f"{type(exc).__name__}: {exc}"))
            continue
        if cfg.invert_signals:
            pred = -pred
        if audit:
            hidden = x.copy()
            hidden[:, t + 1 :] = 0.0
            again = forecast_next(hidden, t, cfg, seed + t)
            if cfg.invert_signals:
                again = -again
            if not np.array_equal(trade_signals(again), trade_signals(pred)):
                raise CausalityError(f"{cfg.name}: day {t} decision depends on future data")
        vol = trailing_volatility(x, t, cfg.vol_window)
        u, pi = risk_parity_step(pred, x[:, t + 1], vol)
        days.append(t)
        preds.append(pred)
        sig.append(u)
        rets.append(x[:, t + 1])
        vols.append(vol)
        port.append(pi)

    port = np.array(port)
    try:
        sh = sharpe_ratio(port)
    except (ValueError, ManifoldForecastError):
        sh = float("nan")
    k = len(pairs)
    shape = lambda rows: np.array(rows).reshape(-1, k)
    return BacktestLedger(
        name=cfg.name,
        pairs=tuple(pairs),
        days=np.array(days, dtype=int),
        dates=np.asarray(ret_dates)[np.array(days, dtype=int) + 1] if days else np.array([]),
        predictions=shape(preds),
        signals=shape(sig),
        returns=shape(rets),
        volatilities=shape(vols),
        portfolio=port,
        sharpe=sh,
        config=cfg.to_dict(),
        failures=failures,
    )


def write_summary(ledgers, path):
    """JSON document with one Sharpe ratio (and bookkeeping) per variant."""
    doc = {
        "format": "manifold_forecast/forex-summary",
        "version": 1,
        "variants": {l.name: l.summary() for l in ledgers},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    return doc


# ---------------------------------------------------------------------------
# Strategy sets
# ---------------------------------------------------------------------------


def default_variants(train_window=100, d=3, include_gpr=False):
    """Random walk, ambient, PCA, DM and LLE variants (MVAR; optionally GPR)."""
    specs = [("Random Walk", dict(model="random_walk"))]
    model_list = ["mvar", "gpr"] if include_gpr else ["mvar"]
    for m in model_list:
        M = m.upper()
        specs += [
            (f"{M}(OS)", dict(model=m)),
            (f"PCA-{M}", dict(embedding="pca", model=m, lifting="linear")),
            (f"DM-{M}-GH", dict(embedding="dm", model=m, lifting="gh")),
            (f"LLE-{M}-GH", dict(embedding="lle", model=m, lifting="gh")),
        ]
    out = []
    for name, kw in specs:
        label = name if kw["model"] == "random_walk" else f"{name}/{train_window}"
        out.append(BacktestConfig(PipelineConfig(name=label, d=d, **kw), train_window=train_window))
    return out


def variants_from_dict(data):
    """Parse a backtest config mapping: shared ``defaults`` plus a ``variants`` list."""
    if not isinstance(data, dict) or "variants" not in data:
        raise ConfigError("forex config needs a 'variants' list")
    unknown = set(data) - {"defaults", "variants", "seed", "basis"}
    if unknown:
        raise ConfigError(f"unknown forex config keys: {sorted(unknown)}")
    defaults = data.get("defaults") or {}
    out = []
    for entry in data["variants"]:
        if not isinstance(entry, dict):
            raise ConfigError("each variant must be a mapping")
        out.append(BacktestConfig.from_dict({**defaults, **entry}))
    names = [c.name for c in out]
    if len(set(names)) != len(names):
        raise ConfigError("variant names must be unique")
    return out


# ---------------------------------------------------------------------------
# Synthetic fixture
# ---------------------------------------------------------------------------


FIXTURE_PAIRS = tuple(f"{r}USD" for r in FOREIGN[:10])


def make_fixture(n_days=320, seed=2024, momentum=0.35, n_factors=3, start="2019-01-02"):
    """Synthetic FX panel with persistent (momentum) returns and monthly rates.

    Returns are driven by ``n_factors`` AR(1) factors with coefficient
    ``momentum`` loaded on the ten pairs plus idiosyncratic noise, with a
    daily volatility around 0.5%.  Rates are monthly records that bracket
    every business day of the panel.

    Returns
    -------
    dates : ndarray of datetime64[D]
    spot : ndarray, shape (10, n_days)
    rate_records : dict region -> (dates, annual percent)
    """
    rng = np.random.default_rng(seed)
    first = np.datetime64(start, "D")
    dates = np.busday_offset(first, np.arange(n_days), roll="forward")
    k = len(FIXTURE_PAIRS)
    loadings = rng.normal(0.0, 1.0, (k, n_factors))
    f = np.zeros((n_factors, n_days))
    shocks = rng.standard_normal((n_factors, n_days))
    for t in range(1, n_days):
        f[:, t] = momentum * f[:, t - 1] + shocks[:, t]
    idio = rng.standard_normal((k, n_days))
    r = 0.004 * (loadings @ f) / math.sqrt(n_factors) + 0.002 * idio
    r[:, 0] = 0.0
    levels = rng.uniform(0.5, 1.5, k)
    spot = levels[:, None] * np.exp(np.cumsum(r, axis=1))

    months = np.arange(
        (dates[0].astype("datetime64[M]") - 1),
        (dates[-1].astype("datetime64[M]") + 2),
    ).astype("datetime64[D]")
    records = {}
    for region, base in zip(REGIONS, (2.0, 0.0, 0.75, 1.5, 1.0, -0.1, 1.75, -0.75, -0.25, 1.0, -0.6)):
        walk = base + np.cumsum(rng.normal(0.0, 0.05, len(months)))
        records[region] = (months, np.round(walk, 4))
    return dates, spot, records


def write_fixture(prices_path, rates_path, **kwargs):
    """Write :func:`make_fixture` output in the two CSV formats."""
    dates, spot, records = make_fixture(**kwargs)
    with open(prices_path, "w", newline="") as fh:
        fh.write("date,pair,close\n")
        for j, date in enumerate(dates):
            for i, pair in enumerate(FIXTURE_PAIRS):
                fh.write(f"{date},{pair},{spot[i, j]:.10f}\n")
    with open(rates_path, "w", newline="") as fh:
        fh.write("date,region,annual_rate_percent\n")
        for region in REGIONS:
            rd, vals = records[region]
            for date, v in zip(rd, vals):
                fh.write(f"{date},{region},{v:.4f}\n")


def fixture_paths():
    """Paths of the bundled fixture CSVs (prices, rates)."""
    from importlib import resources

    base = resources.files("manifold_forecast").joinpath("data")
    return str(base.joinpath("fx_prices.csv")), str(base.joinpath("fx_rates.csv"))
