"""Lifting reduced coordinates back to the ambient space, and restricting new points.

Two lifting operators are provided:

* radial-power RBF interpolation over the ``k`` nearest embedded neighbors,
  rebuilt for every query (local);
* geometric harmonics, the Nystrom extension of the eigenvectors of a
  Markov kernel built on the embedded coordinates (global, fitted once).

Embedded and ambient reference sets are ``d x N`` and ``D x N`` matrices.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack
from scipy.spatial.distance import cdist, pdist, squareform

from .embedding import _as_feature_matrix, _fix_signs, _top_eigenpairs, select_scale
from .errors import DuplicateNeighborsError, IllConditionedError, NumericalError

log = logging.getLogger(__name__)

MAX_CONDITION = 1e12


def knn_query(query, reference, k):
    """Exhaustive k-nearest-neighbor search.

    Parameters
    ----------
    query : array_like, shape (d,)
    reference : ndarray, shape (d, N)
    k : int
        ``1 <= k <= N``.

    Returns
    -------
    indices, distances : ndarray
        Sorted by distance; ties go to the lower reference index.
    """
    reference = _as_feature_matrix(reference, "reference")
    query = np.asarray(query, dtype=float).ravel()
    n = reference.shape[1]
    if int(k) != k or not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")
    if query.shape[0] != reference.shape[0]:
        raise ValueError("query and reference dimensions differ")
    dist = np.sqrt(np.sum((reference - query[:, None]) ** 2, axis=0))
    idx = np.argsort(dist, kind="stable")[: int(k)]
    return idx, dist[idx]


def _row_softmax(neg_sq):
    """Row-normalized Gaussian weights from ``-|y - y_j|^2 / sigma``; immune to underflow."""
    neg_sq = np.atleast_2d(neg_sq)
    w = np.exp(neg_sq - neg_sq.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Radial-power RBF lifting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RbfLiftOperator:
    power: int
    n_neighbors: int
    reference_embedded: np.ndarray
    reference_ambient: np.ndarray

    def __post_init__(self):
        Y = _as_feature_matrix(self.reference_embedded, "reference_embedded")
        X = _as_feature_matrix(self.reference_ambient, "reference_ambient")
        if Y.shape[1] != X.shape[1]:
            raise ValueError("embedded and ambient reference sets must have the same number of points")
        if int(self.power) != self.power or self.power < 1 or self.power % 2 == 0:
            raise ValueError(f"radial power must be a positive odd integer, got {self.power}")
        if int(self.n_neighbors) != self.n_neighbors or not 1 <= self.n_neighbors <= Y.shape[1]:
            raise ValueError(f"n_neighbors must lie in [1, {Y.shape[1]}], got {self.n_neighbors}")
        object.__setattr__(self, "reference_embedded", Y)
        object.__setattr__(self, "reference_ambient", X)


def rbf_fit(embedded, ambient, k=50, p=1):
    """Store the reference pairs; the interpolant itself is local to each query."""
    return RbfLiftOperator(int(p), int(min(k, np.shape(embedded)[1])), embedded, ambient)


def _solve_checked(A, rhs):
    lu, piv = sla.lu_factor(A, check_finite=False)
    anorm = np.linalg.norm(A, 1)
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or not rcond > 1.0 / MAX_CONDITION:
        raise IllConditionedError(np.inf if rcond == 0 else 1.0 / rcond)
    return sla.lu_solve((lu, piv), rhs, check_finite=False)


def rbf_lift(op, y):
    """Lift one embedded point by radial-power interpolation over its neighbors.

    Raises
    ------
    DuplicateNeighborsError
        Two neighbors coincide.
    IllConditionedError
        The LU condition estimate of the interpolation matrix exceeds 1e12.
    """
    y = np.asarray(y, dtype=float).ravel()
    if not np.all(np.isfinite(y)):
        raise ValueError("query point must be finite")
    idx, dist = knn_query(y, op.reference_embedded, op.n_neighbors)
    Yn = op.reference_embedded[:, idx]
    pair = squareform(pdist(Yn.T))
    np.fill_diagonal(pair, np.inf)
    if np.any(pair == 0):
        a, b = np.argwhere(pair == 0)[0]
        raise DuplicateNeighborsError(int(idx[a]), int(idx[b]))
    np.fill_diagonal(pair, 0.0)
    A = pair**op.power
    C = _solve_checked(A, op.reference_ambient[:, idx].T)
    return (dist**op.power) @ C


def rbf_lift_batch(op, Y):
    """Column-wise :func:`rbf_lift`; ``Y`` is ``d x L``, result ``D x L``."""
    Y = _as_feature_matrix(Y, "Y")
    return np.column_stack([rbf_lift(op, Y[:, j]) for j in range(Y.shape[1])])


# ---------------------------------------------------------------------------
# Geometric harmonics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GhOperator:
    """Geometric-harmonics extension of the ambient coordinate functions.

    ``eigenvectors`` are right eigenvectors of the row-stochastic kernel on
    the embedded reference set, orthonormal in the degree-weighted inner
    product; ``projected_functions[l, i]`` is the weighted inner product of
    mode ``l`` with ambient coordinate ``i``.
    """

    embedded_kernel_scale: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    projected_functions: np.ndarray
    truncation_threshold: float
    reference_embedded: np.ndarray
    degrees: np.ndarray

    @property
    def n_modes(self):
        return self.eigenvalues.shape[0]

    def training_reconstruction(self):
        """Rank-q projection of the ambient data at the reference points (``D x N``)."""
        return (self.eigenvectors @ self.projected_functions).T


def gh_fit(embedded, ambient, q=None, delta=1e-6, sigma=None):
    """Fit geometric harmonics of the ambient coordinates over the embedded set.

    Parameters
    ----------
    embedded : ndarray, shape (d, N)
    ambient : ndarray, shape (D, N)
    q : int, optional
        Number of leading modes kept, the constant mode included.  Defaults
        to ``d + 1``: the constant plus as many harmonics as embedded
        coordinates, which filters the ambient functions to their smooth
        part.  Pass ``N`` to keep every mode above the threshold.
    delta : float
        Modes with ``mu_l <= delta * mu_1`` are dropped.
    sigma : float, optional
        Kernel scale on the embedded coordinates; auto-selected by default.
    """
    Y = _as_feature_matrix(embedded, "embedded")
    X = _as_feature_matrix(ambient, "ambient")
    n = Y.shape[1]
    if X.shape[1] != n:
        raise ValueError("embedded and ambient sets must have the same number of points")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if q is None:
        q = min(Y.shape[0] + 1, n)
    if int(q) != q or not 1 <= q <= n:
        raise ValueError(f"q must satisfy 1 <= q <= {n}, got {q}")
    if sigma is None:
        sigma = select_scale(Y)
    K = np.exp(-squareform(pdist(Y.T, "sqeuclidean")) / sigma)
    deg = K.sum(axis=1)
    root = np.sqrt(deg)
    S = K / root[:, None] / root[None, :]
    S = 0.5 * (S + S.T)
    mu, U = _top_eigenpairs(S, int(q))
    keep = mu > delta * mu[0]
    if not np.any(keep):
        raise NumericalError("every geometric-harmonics mode fell below the truncation threshold")
    mu, U = mu[keep], U[:, keep]
    V = _fix_signs(U / root[:, None])
    A = V.T @ (deg[:, None] * X.T)
    return GhOperator(float(sigma), mu, V, A, float(delta), Y, deg)


def gh_extend(op, y):
    """Extend the ambient coordinate functions to one embedded point."""
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != op.reference_embedded.shape[0]:
        raise ValueError("query dimension does not match the embedded reference set")
    diff = op.reference_embedded - y[:, None]
    neg = -np.einsum("ij,ij->j", diff, diff) / op.embedded_kernel_scale
    w = np.exp(neg - neg.max())
    w /= w.sum()
    vhat = (w @ op.eigenvectors) / op.eigenvalues
    return vhat @ op.projected_functions


def gh_extend_batch(op, Y):
    """Extension at the columns of ``Y`` (``d x L``) as one matrix product; returns ``D x L``."""
    Y = _as_feature_matrix(Y, "Y")
    if Y.shape[0] != op.reference_embedded.shape[0]:
        raise ValueError("query dimension does not match the embedded reference set")
    neg = -cdist(Y.T, op.reference_embedded.T, "sqeuclidean") / op.embedded_kernel_scale
    P = _row_softmax(neg)
    return ((P @ op.eigenvectors) / op.eigenvalues @ op.projected_functions).T


# ---------------------------------------------------------------------------
# Restriction of new ambient points
# ---------------------------------------------------------------------------


def nystrom_restrict(embedding, X_reference, x):
    """Diffusion-map coordinates of a new ambient point.

    ``y_l = lambda_l^(t-1) * sum_j p(x, x_j) v_l(x_j)`` with ``p`` the
    row-normalized ambient kernel, which reproduces the training
    coordinates exactly at reference points.
    """
    X_reference = _as_feature_matrix(X_reference, "X_reference")
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != X_reference.shape[0]:
        raise ValueError("point dimension does not match the reference set")
    diff = X_reference - x[:, None]
    neg = -np.einsum("ij,ij->j", diff, diff) / embedding.scale
    w = np.exp(neg - neg.max())
    w /= w.sum()
    lam = embedding.eigenvalues
    return lam ** (embedding.diffusion_time - 1) * (w @ embedding.right_eigenvectors)


def nystrom_restrict_batch(embedding, X_reference, X):
    """Restriction of every column of ``X`` (``D x L``); returns ``d x L``."""
    X_reference = _as_feature_matrix(X_reference, "X_reference")
    X = _as_feature_matrix(X, "X")
    neg = -cdist(X.T, X_reference.T, "sqeuclidean") / embedding.scale
    P = _row_softmax(neg)
    lam = embedding.eigenvalues
    return (lam ** (embedding.diffusion_time - 1) * (P @ embedding.right_eigenvectors)).T
