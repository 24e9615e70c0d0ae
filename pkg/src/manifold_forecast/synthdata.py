"""Synthetic five-dimensional stochastic benchmarks.

Three discrete-time models driven by unit Gaussian white noise: a linear
lag-1 model, a nonlinear (exponential-logistic) lag-1 model and a linear model
whose longest lag is three.

Noise convention
----------------
Noise for a run with seed ``s`` is ``numpy.random.default_rng(s)`` (PCG64)
drawing a ``(n_total, 5)`` standard normal block in row-major order, i.e. all
five variables of time step 0, then time step 1, and so on.  Monte-Carlo run
``r`` of an experiment uses ``seed = base_seed + r``.

Initial conditions: the first ``max_lag`` columns are pure noise, the
recurrences start at ``t = max_lag``.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError

VARIABLE_NAMES = ("y1", "y2", "y3", "y4", "y5")


@dataclass(frozen=True)
class TimeSeriesPanel:
    """D x N matrix of observations; column ``j`` is time ``start_index + j``."""

    values: np.ndarray
    variable_names: tuple = field(default=VARIABLE_NAMES)
    start_index: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"panel values must be a non-empty 2-D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("panel values must be finite")
        names = tuple(self.variable_names)
        if len(names) != values.shape[0]:
            raise ValueError(f"{len(names)} variable names for {values.shape[0]} rows")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "variable_names", names)

    @property
    def n_vars(self):
        return self.values.shape[0]

    @property
    def n_obs(self):
        return self.values.shape[1]

    def to_csv(self, path):
        """Write one row per time step; floats keep 17 significant digits."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.variable_names)
            for column in self.values.T:
                writer.writerow([format(float(v), ".17g") for v in column])

    @classmethod
    def from_csv(cls, path, start_index=0):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError("empty panel file", row=1) from None
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise DataError(f"expected {len(header)} fields, got {len(row)}", row=lineno)
                try:
                    values = [float(v) for v in row]
                except ValueError as exc:
                    raise DataError(str(exc), row=lineno) from None
                if not all(math.isfinite(v) for v in values):
                    raise DataError("non-finite value", row=lineno)
                rows.append(values)
        if not rows:
            raise DataError("panel file has no data rows", row=2)
        return cls(np.array(rows).T, tuple(header), start_index)


def _noise(n_total, seed, noise):
    if noise is not None:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (5, n_total):
            raise ValueError(f"noise override must have shape (5, {n_total}), got {noise.shape}")
        return noise
    return np.random.default_rng(seed).standard_normal((n_total, 5)).T.copy()


def _initial_block(initial, max_lag):
    if initial is None:
        return None
    block = np.asarray(initial, dtype=float)
    if block.ndim == 1:
        block = block[:, None]
    if block.shape != (5, max_lag):
        raise ValueError(f"initial state must have shape (5, {max_lag})")
    return block


def _finish(y, burn_in, start_index=0):
    return TimeSeriesPanel(y[:, burn_in:], VARIABLE_NAMES, start_index)


def _check_n(n, minimum):
    if int(n) != n or n < minimum:
        raise ValueError(f"n must be an integer >= {minimum}, got {n}")
    return int(n)


def gen_linear5(n, seed, burn_in=0, noise=None, initial=None):
    """Linear lag-1 model.

    Parameters
    ----------
    n : int
        Number of returned time steps (>= 2).
    seed : int
        PRNG seed for the noise.
    burn_in : int
        Leading steps simulated and discarded.
    noise : ndarray, optional
        ``(5, n + burn_in)`` override of the noise block (testing hook).
    initial : array_like, optional
        Replaces column 0 (normally pure noise).
    """
    n = _check_n(n, 2)
    total = n + burn_in
    w = _noise(total, seed, noise)
    y = np.zeros((5, total))
    init = _initial_block(initial, 1)
    y[:, 0] = w[:, 0] if init is None else init[:, 0]
    for t in range(1, total):
        y1, y2 = y[0, t - 1], y[1, t - 1]
        y[0, t] = 0.2 * y1 - 0.4 * y2 + w[0, t]
        y[1, t] = -0.5 * y1 + 0.15 * y2 + w[1, t]
        y[2, t] = -0.14 * y2 + w[2, t]
        y[3, t] = 0.5 * y1 - 0.25 * y2 + w[3, t]
        y[4, t] = 0.15 * y1 + w[4, t]
    return _finish(y, burn_in)


def _logistic_exp(x):
    return 3.4 * x * (1.0 - x * x) * math.exp(-x * x)


def gen_nonlinear5(n, seed, burn_in=0, noise=None, initial=None):
    """Nonlinear lag-1 model built on x -> 3.4 x (1 - x^2) exp(-x^2).

    Raises :class:`NumericalError` if the simulation ever produces a
    non-finite value (the map is bounded, so that would be a bug).
    """
    n = _check_n(n, 2)
    total = n + burn_in
    w = _noise(total, seed, noise)
    y = np.zeros((5, total))
    init = _initial_block(initial, 1)
    y[:, 0] = w[:, 0] if init is None else init[:, 0]
    for t in range(1, total):
        y1, y2, y3 = y[0, t - 1], y[1, t - 1], y[2, t - 1]
        y[0, t] = _logistic_exp(y1) + w[0, t]
        y[1, t] = _logistic_exp(y2) + 0.5 * y1 * y2 + w[1, t]
        y[2, t] = _logistic_exp(y3) + 0.3 * y2 + 0.5 * y1 * y1 + w[2, t]
        y[3, t] = 0.5 * y1 - 0.25 * y2 + w[3, t]
        y[4, t] = 0.15 * y1 + w[4, t]
    if not np.all(np.isfinite(y)):
        bad = int(np.argmax(~np.all(np.isfinite(y), axis=0)))
        raise NumericalError(f"nonlinear model produced a non-finite value at step {bad}")
    return _finish(y, burn_in)


def gen_linear5_lag3(n, seed, burn_in=0, noise=None, initial=None):
    """Linear model with lags up to three; the first three columns are pure noise."""
    n = _check_n(n, 4)
    total = n + burn_in
    w = _noise(total, seed, noise)
    y = np.zeros((5, total))
    init = _initial_block(initial, 3)
    y[:, :3] = w[:, :3] if init is None else init
    for t in range(3, total):
        y[0, t] = 0.1 * y[0, t - 1] - 0.6 * y[1, t - 3] + w[0, t]
        y[1, t] = -0.15 * y[0, t - 3] + 0.8 * y[1, t - 3] + w[1, t]
        y[2, t] = -0.45 * y[1, t - 3] + w[2, t]
        y[3, t] = 0.45 * y[0, t - 3] - 0.85 * y[1, t - 3] + w[3, t]
        y[4, t] = 0.95 * y[0, t - 2] + w[4, t]
    return _finish(y, burn_in)


GENERATORS = {
    "linear": gen_linear5,
    "nonlinear": gen_nonlinear5,
    "linear_lag3": gen_linear5_lag3,
}


def get_generator(name):
    try:
        return GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None


def split_train_test(panel, n_train):
    """First ``n_train`` columns for training, the rest for testing."""
    if int(n_train) != n_train or not 0 < n_train < panel.n_obs:
        raise ValueError(f"n_train must satisfy 0 < n_train < {panel.n_obs}, got {n_train}")
    n_train = int(n_train)
    train = TimeSeriesPanel(panel.values[:, :n_train], panel.variable_names, panel.start_index)
    test = TimeSeriesPanel(
        panel.values[:, n_train:], panel.variable_names, panel.start_index + n_train
    )
    return train, test
