"""Reduced-order forecasters: MVAR by least squares and GPR with a composite kernel.

Series are passed as ``d x N`` matrices (column = time).  Lagged regressors
are ordered newest first: ``z_t = [y_{t-1}; y_{t-2}; ...; y_{t-m}]``.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from .errors import FactorizationError, RankDeficientError

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


def lagged_design(Y, m):
    """Regressor rows ``[y_{t-1}, ..., y_{t-m}]`` and targets ``y_t`` for ``t = m..N-1``."""
    Y = np.asarray(Y, dtype=float)
    d, n = Y.shape
    if n <= m:
        raise ValueError(f"series of length {n} is too short for {m} lags")
    Z = np.hstack([Y[:, m - j : n - j].T for j in range(1, m + 1)])
    return Z, Y[:, m:].T


# ---------------------------------------------------------------------------
# MVAR
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MvarModel:
    """``y_t = intercept + sum_j y_{t-j} @ coefficient_matrices[j-1] + e_t``.

    ``coefficient_matrices[j-1][a, b]`` is the weight of variable ``a`` at lag
    ``j`` in the equation of variable ``b`` (row-vector convention).
    """

    order: int
    intercept: np.ndarray
    coefficient_matrices: np.ndarray
    residual_covariance: np.ndarray
    n_obs: int

    @property
    def dim(self):
        return self.intercept.shape[0]

    def companion_matrix(self):
        d, m = self.dim, self.order
        C = np.zeros((d * m, d * m))
        C[:d] = np.hstack([A.T for A in self.coefficient_matrices])
        C[d:, :-d] = np.eye(d * (m - 1))
        return C

    def fixed_point(self):
        A = sum(self.coefficient_matrices)
        return np.linalg.solve(np.eye(self.dim) - A.T, self.intercept)


def fit_mvar(Y, m=1, rank_rtol=1e-10):
    """Ordinary least squares MVAR(m) with intercept, solved by pivoted QR.

    Raises :class:`RankDeficientError` when the design ``[1, y_{t-1}, ...,
    y_{t-m}]`` is numerically rank deficient.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ValueError("Y must be a d x N matrix")
    if int(m) != m or m < 1:
        raise ValueError(f"model order must be a positive integer, got {m}")
    m = int(m)
    d, n = Y.shape
    if n <= d * m + 1:
        raise ValueError(f"need N > d*m + 1 = {d * m + 1} observations, got {n}")
    lags, targets = lagged_design(Y, m)
    Z = np.hstack([np.ones((lags.shape[0], 1)), lags])
    Q, R, piv = sla.qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rank_rtol * diag[0]))
    if rank < Z.shape[1]:
        raise RankDeficientError(rank, Z.shape[1])
    B = np.empty((Z.shape[1], d))
    B[piv] = sla.solve_triangular(R, Q.T @ targets)
    resid = targets - Z @ B
    dof = max(Z.shape[0] - Z.shape[1], 1)
    return MvarModel(
        order=m,
        intercept=B[0].copy(),
        coefficient_matrices=B[1:].reshape(m, d, d),
        residual_covariance=resid.T @ resid / dof,
        n_obs=Z.shape[0],
    )


def predict_mvar(model, history):
    """One-step prediction from the last ``m`` observations (``d x m``, newest last)."""
    history = np.asarray(history, dtype=float)
    if history.ndim == 1:
        history = history[:, None]
    if history.shape != (model.dim, model.order):
        raise ValueError(f"history must have shape {(model.dim, model.order)}, got {history.shape}")
    out = model.intercept.copy()
    for j in range(1, model.order + 1):
        out += history[:, -j] @ model.coefficient_matrices[j - 1]
    return out


# ---------------------------------------------------------------------------
# GPR
# ---------------------------------------------------------------------------

N_HYPER = 9  # theta_1..theta_8 and the observation noise variance


def composite_kernel(zi, zj, theta, same_index=False):
    """Scalar composite kernel: RBF + linear + periodic (+ white noise on the same index)."""
    t = np.asarray(theta, dtype=float)
    if np.any(t[:8] <= 0):
        raise ValueError("kernel hyperparameters must be positive")
    zi = np.atleast_1d(np.asarray(zi, dtype=float))
    zj = np.atleast_1d(np.asarray(zj, dtype=float))
    diff = zi - zj
    sq = float(diff @ diff)
    r = np.sqrt(sq)
    k = t[0] ** 2 * np.exp(-sq / (2.0 * t[1] ** 2))
    k += t[2] ** 2 + t[3] ** 2 * float(zi @ zj)
    k += t[4] ** 2 * np.exp(-2.0 * np.sin(np.pi * r / t[5]) ** 2 / t[6] ** 2)
    if same_index:
        k += t[7] ** 2
    return float(k)


class _PairGeometry:
    """Squared distances, distances and inner products between two input sets."""

    def __init__(self, Z1, Z2=None):
        same = Z2 is None
        Z2 = Z1 if same else Z2
        self.sq = cdist(Z1, Z2, "sqeuclidean")
        self.dist = np.sqrt(self.sq)
        self.inner = Z1 @ Z2.T
        self.same = same


def kernel_matrix(theta, Z1, Z2=None, geometry=None):
    """Composite kernel matrix; the white-noise term is added only when ``Z2`` is omitted."""
    t = np.asarray(theta, dtype=float)
    g = geometry if geometry is not None else _PairGeometry(Z1, Z2)
    K = t[0] ** 2 * np.exp(g.sq * (-0.5 / t[1] ** 2))
    K += t[2] ** 2
    K += t[3] ** 2 * g.inner
    s = np.sin(g.dist * (np.pi / t[5]))
    K += t[4] ** 2 * np.exp((s * s) * (-2.0 / t[6] ** 2))
    if g.same:
        K[np.diag_indices_from(K)] += t[7] ** 2
    return K


def _cholesky(A):
    """Lower Cholesky factor, retrying with jitter 1e-10, 1e-8, 1e-6 times the mean diagonal."""
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(A)))
    jitter = 0.0
    for rel in (1e-10, 1e-8, 1e-6):
        jitter = rel * scale
        try:
            return np.linalg.cholesky(A + jitter * np.eye(A.shape[0])), jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(jitter)


def _noisy_kernel(theta, Z, geometry=None):
    K = kernel_matrix(theta, Z, geometry=geometry)
    K[np.diag_indices_from(K)] += theta[8]
    return K


def gpr_nll(theta, Z, y, geometry=None):
    """Negative log marginal likelihood of ``y`` under ``K(Z, Z | theta) + sigma^2 I``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (N_HYPER,) or np.any(theta <= 0):
        raise ValueError("theta must hold 9 positive values (theta_1..theta_8, noise variance)")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float)
    L, _ = _cholesky(_noisy_kernel(theta, Z, geometry))
    a = sla.solve_triangular(L, y, lower=True)
    return float(0.5 * a @ a + np.sum(np.log(np.diag(L))) + 0.5 * len(y) * LOG2PI)


def default_hyperparameters(Z):
    """Scale-aware starting point for the optimizer (inputs as used by the kernel)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    dist = np.sqrt(cdist(Z, Z, "sqeuclidean")[np.triu_indices(Z.shape[0], 1)])
    dist = dist[dist > 0]
    if dist.size == 0:
        med, iqr = 1.0, 1.0
    else:
        q1, med, q3 = np.percentile(dist, [25, 50, 75])
        iqr = q3 - q1 if q3 > q1 else med
    return np.array([1.0, med, 0.1, 0.1, 1.0, iqr, 1.0, 0.1, 0.1])


def nll_fd_gradient(log_theta, Z, y, eps=1e-8, geometry=None):
    """Forward-difference gradient of the NLL with respect to log-hyperparameters."""
    f0 = gpr_nll(np.exp(log_theta), Z, y, geometry)
    g = np.empty_like(log_theta)
    for i in range(len(log_theta)):
        step = log_theta.copy()
        step[i] += eps
        g[i] = (gpr_nll(np.exp(step), Z, y, geometry) - f0) / eps
    return g


@dataclass(frozen=True)
class GprModel:
    """Independent single-output GPs sharing the training inputs.

    ``hyperparameters[k]`` holds ``theta_1..theta_8`` and the noise variance
    of output ``k`` in standardized units.  ``order`` is the number of lags
    when the model was fitted to a time series (``None`` for plain regression).
    """

    hyperparameters: np.ndarray
    training_inputs: np.ndarray
    training_targets: np.ndarray
    cholesky_factors: tuple
    alpha: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray
    target_mean: np.ndarray
    target_scale: np.ndarray
    nll: np.ndarray
    order: int = None

    @property
    def n_outputs(self):
        return self.alpha.shape[1]

    @property
    def dim(self):
        return self.n_outputs


def _standardize(A):
    mean = A.mean(axis=0)
    scale = A.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return (A - mean) / scale, mean, scale


_BOUNDS = (np.log(1e-5), np.log(1e5))


def feasible_start(theta, Z, geometry=None, max_tries=24, min_period=None):
    """Move ``theta`` into the region where the kernel matrix factorizes.

    The periodic term evaluated on Euclidean distances is not positive
    definite for multi-dimensional inputs, so a starting point can be
    infeasible.  The period is doubled (towards the smooth, Gaussian-like
    limit) and, every fourth try, the noise variance is raised tenfold.
    """
    theta = np.clip(np.asarray(theta, dtype=float).copy(), 1e-5, 1e5)
    if min_period is not None:
        theta[5] = max(theta[5], min_period)
    for i in range(max_tries):
        try:
            _cholesky(_noisy_kernel(theta, Z, geometry))
            return theta
        except FactorizationError:
            theta[5] = min(theta[5] * 2.0, 1e5)
            if i % 4 == 3:
                theta[8] = min(theta[8] * 10.0, 1e5)
    raise FactorizationError(theta[8])


def penalized_nll(theta, Z, y, geometry=None, weight=1e3):
    """NLL that stays finite outside the positive-definite region.

    Where the Cholesky factorization fails, the kernel is shifted by its most
    negative eigenvalue (plus a small margin) and ``weight * N * shift`` is
    added, so the line search sees a graded barrier instead of a wall.
    """
    try:
        return gpr_nll(theta, Z, y, geometry)
    except FactorizationError:
        pass
    K = _noisy_kernel(theta, Z, geometry)
    scale = float(np.mean(np.diag(K)))
    shift = max(-float(np.linalg.eigvalsh(K)[0]), 0.0) + 1e-6 * scale
    K[np.diag_indices_from(K)] += shift
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return 1e25
    a = sla.solve_triangular(L, y, lower=True)
    value = 0.5 * a @ a + np.sum(np.log(np.diag(L))) + 0.5 * len(y) * LOG2PI
    return float(value + weight * len(y) * shift)


def _optimize_output(Zs, y, starts, geometry, bounds=None):
    bounds = [_BOUNDS] * N_HYPER if bounds is None else bounds
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(log_theta):
        value = penalized_nll(np.exp(log_theta), Zs, y, geometry)
        return value if np.isfinite(value) else 1e25

    candidates = []
    for start in starts:
        try:
            start = feasible_start(start, Zs, geometry, min_period=np.exp(lo[5]))
        except FactorizationError:
            continue
        x0 = np.clip(np.log(start), lo, hi)
        res = minimize(
            objective,
            x0,
            method="L-BFGS-B",
            bounds=bounds,
            options={"ftol": 1e-9, "gtol": 1e-5, "eps": 1e-8, "maxls": 20},
        )
        if res.fun < 1e25:
            candidates.append((float(res.fun), np.exp(res.x)))
    if not candidates:
        raise FactorizationError(1e-6)
    return candidates


def _distinct(candidates, tol=1e-3):
    """Candidate optima ordered by objective, dropping near-duplicates in log space."""
    kept = []
    for _, theta in sorted(candidates, key=lambda c: c[0]):
        lt = np.log(theta)
        if all(np.max(np.abs(lt - np.log(t))) > tol for t in kept):
            kept.append(theta)
    return kept


def _factor_full(theta, Z, geometry):
    """Factor the full training kernel, raising the noise variance just enough if needed."""
    K = _noisy_kernel(theta, Z, geometry)
    try:
        L, _ = _cholesky(K)
        return L, theta
    except FactorizationError:
        pass
    shift = -float(sla.eigvalsh(K, subset_by_index=[0, 0])[0]) + 1e-6 * float(np.mean(np.diag(K)))
    log.warning("kernel indefinite on the full training set; noise variance raised by %.3e", shift)
    theta = theta.copy()
    theta[8] += shift
    L, _ = _cholesky(_noisy_kernel(theta, Z, geometry))
    return L, theta


def fit_gpr(Z, Y, theta0=None, n_restarts=3, max_opt_points=200, seed=0, order=None):
    """Fit one GP per output by minimizing the negative log marginal likelihood.

    Parameters
    ----------
    Z : ndarray, shape (N, p)
        Training inputs.
    Y : ndarray, shape (N, d) or (N,)
        Training targets, standardized internally per output.
    theta0 : array_like, optional
        Starting hyperparameters (9 values); scale-aware defaults otherwise.
    n_restarts : int
        Extra starts, each a log-normal jitter of ``theta0``; the best
        objective wins.
    max_opt_points : int or None
        The hyperparameter search uses at most this many evenly spaced
        training rows; the posterior is always conditioned on all rows.
    seed : int
        Seed for the restart jitter.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = Z.shape[0]
    if Y.shape[0] != n:
        raise ValueError("Z and Y must have the same number of rows")
    if n < 5:
        raise ValueError(f"GPR needs at least 5 training points, got {n}")

    Zs, z_mean, z_scale = _standardize(Z)
    Ys, y_mean, y_scale = _standardize(Y)

    if max_opt_points is not None and n > max_opt_points:
        sub = np.unique(np.linspace(0, n - 1, max_opt_points).round().astype(int))
    else:
        sub = np.arange(n)
    Zo = Zs[sub]
    geometry = _PairGeometry(Zo)
    full_geometry = _PairGeometry(Zs)
    # periods shorter than twice the input diameter make the periodic term
    # strongly indefinite, so the search is restricted to longer ones
    diameter = float(full_geometry.dist.max()) if n > 1 else 1.0
    bounds = [_BOUNDS] * N_HYPER
    bounds[5] = (np.log(min(max(2.0 * diameter, 1e-5), 1e5)), _BOUNDS[1])
    base = default_hyperparameters(Zo) if theta0 is None else np.asarray(theta0, dtype=float)
    rng = np.random.default_rng(seed)
    starts = [base] + [base * np.exp(rng.normal(0.0, 0.5, N_HYPER)) for _ in range(n_restarts)]

    thetas, factors, nlls = [], [], []
    alpha = np.empty_like(Ys)
    for k in range(Ys.shape[1]):
        candidates = _optimize_output(Zo, Ys[sub, k], starts, geometry, bounds)
        if len(sub) < n and len(candidates) > 1:
            # rank the distinct restart optima on the full training set
            scored = [(penalized_nll(t, Zs, Ys[:, k], full_geometry), t) for t in _distinct(candidates)]
        else:
            scored = candidates
        theta = min(scored, key=lambda c: c[0])[1]
        L, theta = _factor_full(theta, Zs, full_geometry)
        alpha[:, k] = sla.cho_solve((L, True), Ys[:, k])
        a = sla.solve_triangular(L, Ys[:, k], lower=True)
        nlls.append(0.5 * a @ a + np.sum(np.log(np.diag(L))) + 0.5 * n * LOG2PI)
        thetas.append(theta)
        factors.append(L)
    return GprModel(
        hyperparameters=np.array(thetas),
        training_inputs=Zs,
        training_targets=Ys,
        cholesky_factors=tuple(factors),
        alpha=alpha,
        input_mean=z_mean,
        input_scale=z_scale,
        target_mean=y_mean,
        target_scale=y_scale,
        nll=np.array(nlls),
        order=order,
    )


def fit_gpr_series(Y, m=1, **kwargs):
    """GPR one-step-ahead model of a ``d x N`` series with ``m`` lags."""
    Z, targets = lagged_design(Y, m)
    return fit_gpr(Z, targets, order=m, **kwargs)


def predict_gpr(model, z, return_variance=True):
    """Posterior mean and variance (original target units) at one input vector."""
    z = np.asarray(z, dtype=float).ravel()
    if z.shape[0] != model.training_inputs.shape[1]:
        raise ValueError(f"input must have {model.training_inputs.shape[1]} entries, got {z.shape[0]}")
    zs = ((z - model.input_mean) / model.input_scale)[None, :]
    geometry = _PairGeometry(zs, model.training_inputs)
    d = model.n_outputs
    mean = np.empty(d)
    var = np.full(d, np.nan)
    for k in range(d):
        theta = model.hyperparameters[k]
        kvec = kernel_matrix(theta, zs, geometry=geometry)[0]
        mean[k] = kvec @ model.alpha[:, k]
        if return_variance:
            prior = kernel_matrix(theta, zs, zs)[0, 0]
            v = sla.solve_triangular(model.cholesky_factors[k], kvec, lower=True)
            var_k = prior - v @ v
            if var_k < 0:
                if var_k < -1e-8 * max(prior, 1.0):
                    warnings.warn(f"negative posterior variance {var_k:.3e} clamped to 0")
                var_k = 0.0
            var[k] = var_k * model.target_scale[k] ** 2
    mean = mean * model.target_scale + model.target_mean
    return mean, var


# ---------------------------------------------------------------------------
# Forecasting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForecastResult:
    predictions: np.ndarray
    variances: np.ndarray = None
    mode: str = "iterative"

    @property
    def horizon(self):
        return self.predictions.shape[1]


def model_order(model):
    return model.order if model.order is not None else 1


def one_step(model, history, return_variance=False):
    """One-step prediction from ``history`` (``d x m``, newest last)."""
    if isinstance(model, MvarModel):
        return predict_mvar(model, history), None
    history = np.asarray(history, dtype=float)
    m = model_order(model)
    if history.ndim == 1:
        history = history[:, None]
    if history.shape[1] != m:
        raise ValueError(f"history must hold exactly {m} observations")
    z = np.concatenate([history[:, -j] for j in range(1, m + 1)])
    return predict_gpr(model, z, return_variance)


def iterate_forecast(model, init_history, horizon, return_variance=False):
    """Iterate the one-step predictor ``horizon`` times, feeding predictions back."""
    if int(horizon) != horizon or horizon < 1:
        raise ValueError(f"horizon must be a positive integer, got {horizon}")
    history = np.asarray(init_history, dtype=float)
    if history.ndim == 1:
        history = history[:, None]
    m = model.order if isinstance(model, MvarModel) else model_order(model)
    if history.shape[1] < m:
        raise ValueError(f"initial history needs {m} columns, got {history.shape[1]}")
    window = [history[:, -j] for j in range(m, 0, -1)]
    preds = np.empty((history.shape[0], int(horizon)))
    want_var = return_variance and isinstance(model, GprModel)
    variances = np.empty_like(preds) if want_var else None
    for h in range(int(horizon)):
        y, v = one_step(model, np.column_stack(window), want_var)
        preds[:, h] = y
        if want_var:
            variances[:, h] = v
        window = window[1:] + [y]
    if not np.all(np.isfinite(preds)):
        raise FloatingPointError("iterated forecast diverged to non-finite values")
    return ForecastResult(preds, variances, "iterative")


def random_walk_forecast(last_value, horizon):
    """Persistence forecast: every step repeats ``last_value``."""
    if int(horizon) != horizon or horizon < 1:
        raise ValueError(f"horizon must be a positive integer, got {horizon}")
    last = np.asarray(last_value, dtype=float).ravel()
    return ForecastResult(np.repeat(last[:, None], int(horizon), axis=1), None, "iterative")


def naive_one_step_forecast(last_value, observed):
    """One-step-ahead random walk over an observed window.

    Step 0 predicts ``last_value`` and step ``h`` predicts the realized value
    ``observed[:, h - 1]``, so the forecast length equals ``observed.shape[1]``
    and the last observed column is never used.
    """
    last = np.asarray(last_value, dtype=float).ravel()
    obs = np.atleast_2d(np.asarray(observed, dtype=float))
    if obs.shape[0] != last.size:
        raise ValueError(f"last_value has {last.size} variables, observed has {obs.shape[0]}")
    if obs.shape[1] < 1:
        raise ValueError("observed window must have at least one column")
    return ForecastResult(np.hstack([last[:, None], obs[:, :-1]]), None, "one-step")
