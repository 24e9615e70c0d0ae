"""Kernel graphs and manifold embeddings (diffusion maps, LLE, PCA).

Every routine takes the ambient data as a ``D x N`` matrix whose columns are
the observations, and returns coordinates in the same orientation (``d x N``).
Eigenproblems are solved with dense LAPACK symmetric solvers throughout.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import DisconnectedGraphError, NumericalError

log = logging.getLogger(__name__)


def _as_feature_matrix(X, name="X"):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"{name} must be a D x N matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite entries")
    return X


def _fix_signs(vectors):
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


@dataclass(frozen=True)
class KernelGraph:
    kernel_matrix: np.ndarray
    scale: float
    degrees: np.ndarray


def gaussian_kernel_matrix(X, sigma):
    """Dense Gaussian kernel ``k_ij = exp(-||x_i - x_j||^2 / sigma)``.

    Note that ``sigma`` multiplies the *squared* distance, there is no factor 2.
    """
    X = _as_feature_matrix(X)
    if not sigma > 0 or not np.isfinite(sigma):
        raise ValueError(f"sigma must be a positive finite number, got {sigma}")
    if X.shape[1] < 2:
        raise ValueError("need at least two points to build a kernel graph")
    sq = squareform(pdist(X.T, "sqeuclidean"))
    K = np.exp(-sq / sigma)
    return KernelGraph(K, float(sigma), K.sum(axis=1))


def cross_kernel(Y, X, sigma):
    """Gaussian kernel between the columns of ``Y`` (queries) and ``X``; shape (L, N)."""
    return np.exp(-cdist(np.atleast_2d(Y.T), X.T, "sqeuclidean") / sigma)


def log_kernel_sum(sq_dists, n_points, sigmas):
    """``log L(sigma)`` with ``L = sum_ij exp(-d_ij^2 / sigma)`` over all ordered pairs.

    ``sq_dists`` holds the condensed (i < j) squared distances.
    """
    out = np.empty(len(sigmas))
    for i, s in enumerate(sigmas):
        out[i] = np.log(n_points + 2.0 * np.exp(-sq_dists / s).sum())
    return out


def select_scale(X, n_grid=49, span=1e3, connect=True):
    """Kernel scale from the log-log kernel-sum criterion.

    ``L(sigma)`` is evaluated on a geometric grid covering
    ``[median / span, median * span]`` where ``median`` is the median squared
    pairwise distance.  ``log L`` against ``log sigma`` rises from ``log N``
    to ``2 log N`` through a linear regime whose slope is about half the
    intrinsic dimension; the grid point with the steepest slope is taken.

    With ``connect`` the result is raised, when needed, to the largest
    nearest-neighbor squared distance, so no point is left isolated (an
    isolated outlier contributes a spurious unit eigenvalue).
    """
    X = _as_feature_matrix(X)
    n = X.shape[1]
    if n < 10:
        raise ValueError(f"scale selection needs at least 10 points, got {n}")
    sq = pdist(X.T, "sqeuclidean")
    med = float(np.median(sq))
    if med <= 0:
        positive = sq[sq > 0]
        if positive.size == 0:
            raise ValueError("all points are identical; kernel scale is undefined")
        med = float(np.median(positive))
    sigmas = med * np.logspace(-np.log10(span), np.log10(span), n_grid)
    logL = log_kernel_sum(sq, n, sigmas)
    slope = np.gradient(logL, np.log(sigmas))
    sigma = float(sigmas[int(np.argmax(slope))])
    if connect:
        full = squareform(sq)
        np.fill_diagonal(full, np.inf)
        floor = float(full.min(axis=1).max())
        if floor > sigma:
            log.debug("kernel scale raised from %.4g to %.4g to keep every point connected", sigma, floor)
            sigma = floor
    return sigma


def kernel_sum_slope(X, sigma, rel_step=1e-3):
    """Central-difference slope ``d log L / d log sigma`` at ``sigma`` (diagnostic)."""
    X = _as_feature_matrix(X)
    sq = pdist(X.T, "sqeuclidean")
    lo, hi = log_kernel_sum(sq, X.shape[1], [sigma * (1 - rel_step), sigma * (1 + rel_step)])
    return float((hi - lo) / (np.log1p(rel_step) - np.log1p(-rel_step)))


def markov_normalize(graph):
    """Row-stochastic ``P = D^-1 K`` and its symmetric conjugate ``S = D^-1/2 K D^-1/2``."""
    K = np.asarray(graph.kernel_matrix, dtype=float)
    deg = np.asarray(graph.degrees, dtype=float)
    bad = np.flatnonzero(~(deg > 0))
    if bad.size:
        raise DisconnectedGraphError(int(bad[0]))
    P = K / deg[:, None]
    root = np.sqrt(deg)
    S = K / root[:, None] / root[None, :]
    S = 0.5 * (S + S.T)
    return P, S


def _top_eigenpairs(S, count):
    """Largest ``count`` eigenpairs of a symmetric matrix, descending."""
    n = S.shape[0]
    try:
        if count < n:
            w, U = sla.eigh(S, subset_by_index=[n - count, n - 1], driver="evr")
        else:
            w, U = sla.eigh(S)
    except (sla.LinAlgError, ValueError) as exc:
        raise NumericalError(f"symmetric eigensolver failed: {exc}") from exc
    order = np.argsort(w)[::-1]
    return w[order], U[:, order]


@dataclass(frozen=True)
class DmEmbedding:
    """Diffusion-map coordinates ``coords[l] = eigenvalues[l]**t * V[:, l]``.

    ``right_eigenvectors`` are ``D^-1/2 u`` with ``u`` the unit eigenvectors
    of the symmetric conjugate, so they are orthonormal under the degree
    weighting and the embedded Euclidean distance matches the diffusion
    distance when every mode is kept.
    """

    coords: np.ndarray
    eigenvalues: np.ndarray
    right_eigenvectors: np.ndarray
    diffusion_time: int
    scale: float
    degrees: np.ndarray
    selected: np.ndarray

    @property
    def dim(self):
        return self.coords.shape[0]


def local_linear_residuals(vectors, eps_scale=3.0):
    """Normalized leave-one-out local-linear regression residual of each column.

    Column ``k`` is regressed on columns ``0..k-1`` with a Gaussian-weighted
    local linear fit; a residual near 1 means the column carries a new
    direction, near 0 means it is a harmonic of earlier ones.
    """
    n, m = vectors.shape
    res = np.ones(m)
    for k in range(1, m):
        base = vectors[:, :k]
        target = vectors[:, k]
        sq = squareform(pdist(base, "sqeuclidean"))
        eps = np.median(np.sqrt(sq[np.triu_indices(n, 1)])) / eps_scale
        W = np.exp(-sq / eps**2)
        np.fill_diagonal(W, 0.0)
        fit = np.empty(n)
        for i in range(n):
            A = np.hstack([np.ones((n, 1)), base - base[i]])
            Aw = A * W[i][:, None]
            coef = np.linalg.lstsq(Aw.T @ A, Aw.T @ target, rcond=None)[0]
            fit[i] = coef[0]
        res[k] = np.sqrt(np.sum((target - fit) ** 2) / np.sum(target**2))
    return res


def dm_embed(X, d, t=1, sigma=None, parsimonious=False, n_candidates=None, residual_threshold=0.2):
    """Diffusion-map embedding of the columns of ``X``.

    Parameters
    ----------
    X : ndarray, shape (D, N)
    d : int
        Number of non-trivial coordinates, ``1 <= d <= N - 1``.
    t : int
        Diffusion time.
    sigma : float, optional
        Kernel scale; selected with :func:`select_scale` when omitted.
    parsimonious : bool
        Keep only eigenvectors that are not local functions of the previously
        kept ones (normalized local-linear residual above ``residual_threshold``).
        Off by default: the leading non-trivial eigenvectors are returned.
    """
    X = _as_feature_matrix(X)
    n = X.shape[1]
    if int(d) != d or not 1 <= d <= n - 1:
        raise ValueError(f"d must satisfy 1 <= d <= N - 1 = {n - 1}, got {d}")
    if int(t) != t or t < 1:
        raise ValueError(f"diffusion time must be a positive integer, got {t}")
    d, t = int(d), int(t)
    if sigma is None:
        sigma = select_scale(X)
    graph = gaussian_kernel_matrix(X, sigma)
    _, S = markov_normalize(graph)

    if parsimonious:
        count = min(n, 1 + (n_candidates or max(4 * d, d + 10)))
    else:
        count = d + 1
    w, U = _top_eigenpairs(S, count)
    w, U = w[1:], U[:, 1:]  # trivial lambda_0 = 1 mode
    V = _fix_signs(U / np.sqrt(graph.degrees)[:, None])

    if parsimonious:
        keep = [0]
        for k in range(1, V.shape[1]):
            if len(keep) == d:
                break
            r = local_linear_residuals(V[:, keep + [k]])[-1]
            if r > residual_threshold:
                keep.append(k)
        if len(keep) < d:
            log.warning("parsimonious filter kept %d of %d requested modes; padding", len(keep), d)
            keep += [k for k in range(V.shape[1]) if k not in keep][: d - len(keep)]
        selected = np.array(sorted(keep))
    else:
        selected = np.arange(d)

    lam = w[selected]
    V = V[:, selected]
    coords = (lam**t)[:, None] * V.T
    return DmEmbedding(coords, lam, V, t, float(sigma), graph.degrees, selected)


def diffusion_distance(P, i, j, degrees, t=1):
    """Diffusion distance between points ``i`` and ``j`` from the rows of ``P^t``."""
    Pt = np.linalg.matrix_power(P, t)
    diff = Pt[i] - Pt[j]
    return float(np.sqrt(np.sum(diff**2 / degrees)))


@dataclass(frozen=True)
class LleEmbedding:
    coords: np.ndarray
    weights: sp.csr_matrix
    n_neighbors: int
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def neighbor_indices(X, k):
    """Indices of the ``k`` nearest other points of every column of ``X``; shape (N, k)."""
    pts = X.T
    n = pts.shape[0]
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    out = np.empty((n, k), dtype=int)
    for i in range(n):
        row = [j for j in idx[i] if j != i][:k]
        out[i] = row
    return out


def reconstruction_weights(x, neighbors, rtol=1e-10):
    """Weights summing to one that best reconstruct ``x`` from ``neighbors``.

    ``neighbors`` is ``D x k``.  The local Gram system is solved through its
    eigendecomposition; eigenvalues below ``rtol`` times the largest are
    treated as exact zeros.  When the Gram matrix is singular (``k > D`` or
    degenerate neighborhoods) this yields the minimum-norm weight vector among
    all exact reconstructions, which is the zero-ridge limit of the usual
    Tikhonov-regularized solution.
    """
    C = neighbors - x[:, None]
    G = C.T @ C
    k = G.shape[0]
    ones = np.ones(k)
    mu, E = np.linalg.eigh(G)
    top = mu[-1] if mu[-1] > 0 else 1.0
    null = mu <= rtol * top
    if np.any(null):
        En = E[:, null]
        w = En @ (En.T @ ones)
        norm = w.sum()
        if norm > rtol:
            return w / norm
    inv = np.where(null, 0.0, 1.0 / np.where(null, 1.0, mu))
    w = E @ (inv * (E.T @ ones))
    s = w.sum()
    if not np.isfinite(s) or abs(s) < np.finfo(float).tiny:
        raise NumericalError("degenerate neighborhood: reconstruction weights undefined")
    return w / s


def lle_embed(X, d, k):
    """Locally linear embedding with ``k`` neighbors into ``d`` coordinates.

    The returned coordinates have zero mean and identity covariance.
    """
    X = _as_feature_matrix(X)
    n = X.shape[1]
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d}")
    if int(k) != k or not d + 1 <= k < n:
        raise ValueError(f"k must satisfy d + 1 <= k < N, got k={k}, d={d}, N={n}")
    d, k = int(d), int(k)

    nbrs = neighbor_indices(X, k)
    rows = np.repeat(np.arange(n), k)
    vals = np.empty((n, k))
    for i in range(n):
        if np.any(np.all(X[:, nbrs[i]] == X[:, [i]], axis=0)):
            raise NumericalError(f"point {i} duplicates one of its neighbors")
        vals[i] = reconstruction_weights(X[:, i], X[:, nbrs[i]])
    W = sp.csr_matrix((vals.ravel(), (rows, nbrs.ravel())), shape=(n, n))

    M = sp.identity(n, format="csr") - W
    Q = (M.T @ M).toarray()
    Q = 0.5 * (Q + Q.T)
    try:
        mu, U = sla.eigh(Q, subset_by_index=[0, d], driver="evr")
    except (sla.LinAlgError, ValueError) as exc:
        raise NumericalError(f"symmetric eigensolver failed: {exc}") from exc
    mu, U = mu[1:], _fix_signs(U[:, 1:])

    Y = U - U.mean(axis=0)
    cov = Y.T @ Y / n
    evals, evecs = np.linalg.eigh(cov)
    whiten = evecs @ np.diag(evals**-0.5) @ evecs.T
    coords = _fix_signs(Y @ whiten).T
    return LleEmbedding(coords, W, k, mu, U)


@dataclass(frozen=True)
class PcaEmbedding:
    coords: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    explained_variance: np.ndarray

    def reconstruct(self, coords):
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            return self.components @ coords + self.mean
        return self.components @ coords + self.mean[:, None]

    def project(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return self.components.T @ (X - self.mean)
        return self.components.T @ (X - self.mean[:, None])


def pca_embed(X, d):
    """Top-``d`` principal components of the column-centered data."""
    X = _as_feature_matrix(X)
    D, n = X.shape
    if int(d) != d or not 1 <= d <= min(D, n):
        raise ValueError(f"d must satisfy 1 <= d <= min(D, N) = {min(D, n)}, got {d}")
    d = int(d)
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    cov = Xc @ Xc.T / max(n - 1, 1)
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(w)[::-1][:d]
    U = _fix_signs(U[:, order])
    return PcaEmbedding(U.T @ Xc, U, mean, w[order])
