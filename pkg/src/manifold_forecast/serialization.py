"""Versioned JSON documents for fitted models, embeddings and lifting operators.

Every document carries ``format`` (``manifold_forecast/<kind>``) and an
integer ``version``; arrays are nested lists of floats, which the standard
``json`` module writes with round-trip precision.  GPR Cholesky factors are
not stored: they are recomputed from the stored hyperparameters on load.
"""

import json

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .embedding import DmEmbedding, LleEmbedding, PcaEmbedding
from .errors import DataError
from .lifting import GhOperator, RbfLiftOperator
from .models import GprModel, MvarModel, _cholesky, _noisy_kernel, _PairGeometry

VERSION = 1
PREFIX = "manifold_forecast/"


def _arr(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def _np(x):
    return None if x is None else np.asarray(x, dtype=float)


def _mvar(m):
    return {
        "order": m.order,
        "intercept": _arr(m.intercept),
        "coefficient_matrices": _arr(m.coefficient_matrices),
        "residual_covariance": _arr(m.residual_covariance),
        "n_obs": m.n_obs,
    }


def _mvar_back(d):
    return MvarModel(
        int(d["order"]),
        _np(d["intercept"]),
        _np(d["coefficient_matrices"]),
        _np(d["residual_covariance"]),
        int(d["n_obs"]),
    )


def _gpr(m):
    return {
        "order": m.order,
        "hyperparameters": _arr(m.hyperparameters),
        "training_inputs": _arr(m.training_inputs),
        "training_targets": _arr(m.training_targets),
        "input_mean": _arr(m.input_mean),
        "input_scale": _arr(m.input_scale),
        "target_mean": _arr(m.target_mean),
        "target_scale": _arr(m.target_scale),
        "nll": _arr(m.nll),
    }


def _gpr_back(d):
    Z = _np(d["training_inputs"])
    Y = _np(d["training_targets"])
    thetas = _np(d["hyperparameters"])
    geometry = _PairGeometry(Z)
    factors = []
    alpha = np.empty_like(Y)
    for k, theta in enumerate(thetas):
        L, _ = _cholesky(_noisy_kernel(theta, Z, geometry))
        factors.append(L)
        alpha[:, k] = sla.cho_solve((L, True), Y[:, k])
    return GprModel(
        hyperparameters=thetas,
        training_inputs=Z,
        training_targets=Y,
        cholesky_factors=tuple(factors),
        alpha=alpha,
        input_mean=_np(d["input_mean"]),
        input_scale=_np(d["input_scale"]),
        target_mean=_np(d["target_mean"]),
        target_scale=_np(d["target_scale"]),
        nll=_np(d["nll"]),
        order=None if d["order"] is None else int(d["order"]),
    )


def _gh(op):
    return {
        "embedded_kernel_scale": op.embedded_kernel_scale,
        "eigenvalues": _arr(op.eigenvalues),
        "eigenvectors": _arr(op.eigenvectors),
        "projected_functions": _arr(op.projected_functions),
        "truncation_threshold": op.truncation_threshold,
        "reference_embedded": _arr(op.reference_embedded),
        "degrees": _arr(op.degrees),
    }


def _gh_back(d):
    return GhOperator(
        float(d["embedded_kernel_scale"]),
        _np(d["eigenvalues"]),
        _np(d["eigenvectors"]),
        _np(d["projected_functions"]),
        float(d["truncation_threshold"]),
        _np(d["reference_embedded"]),
        _np(d["degrees"]),
    )


def _rbf(op):
    return {
        "power": op.power,
        "n_neighbors": op.n_neighbors,
        "reference_embedded": _arr(op.reference_embedded),
        "reference_ambient": _arr(op.reference_ambient),
    }


def _rbf_back(d):
    return RbfLiftOperator(int(d["power"]), int(d["n_neighbors"]), _np(d["reference_embedded"]),
                           _np(d["reference_ambient"]))


def _dm(e):
    return {
        "coords": _arr(e.coords),
        "eigenvalues": _arr(e.eigenvalues),
        "right_eigenvectors": _arr(e.right_eigenvectors),
        "diffusion_time": e.diffusion_time,
        "scale": e.scale,
        "degrees": _arr(e.degrees),
        "selected": [int(i) for i in e.selected],
    }


def _dm_back(d):
    return DmEmbedding(
        _np(d["coords"]),
        _np(d["eigenvalues"]),
        _np(d["right_eigenvectors"]),
        int(d["diffusion_time"]),
        float(d["scale"]),
        _np(d["degrees"]),
        np.asarray(d["selected"], dtype=int),
    )


def _lle(e):
    W = sp.csr_matrix(e.weights)
    return {
        "coords": _arr(e.coords),
        "weights": {
            "shape": list(W.shape),
            "data": _arr(W.data),
            "indices": W.indices.tolist(),
            "indptr": W.indptr.tolist(),
        },
        "n_neighbors": e.n_neighbors,
        "eigenvalues": _arr(e.eigenvalues),
        "eigenvectors": _arr(e.eigenvectors),
    }


def _lle_back(d):
    w = d["weights"]
    W = sp.csr_matrix((_np(w["data"]), np.asarray(w["indices"]), np.asarray(w["indptr"])), shape=tuple(w["shape"]))
    return LleEmbedding(_np(d["coords"]), W, int(d["n_neighbors"]), _np(d["eigenvalues"]), _np(d["eigenvectors"]))


def _pca(e):
    return {
        "coords": _arr(e.coords),
        "components": _arr(e.components),
        "mean": _arr(e.mean),
        "explained_variance": _arr(e.explained_variance),
    }


def _pca_back(d):
    return PcaEmbedding(_np(d["coords"]), _np(d["components"]), _np(d["mean"]), _np(d["explained_variance"]))


_KINDS = {
    "mvar-model": (MvarModel, _mvar, _mvar_back),
    "gpr-model": (GprModel, _gpr, _gpr_back),
    "gh-operator": (GhOperator, _gh, _gh_back),
    "rbf-operator": (RbfLiftOperator, _rbf, _rbf_back),
    "dm-embedding": (DmEmbedding, _dm, _dm_back),
    "lle-embedding": (LleEmbedding, _lle, _lle_back),
    "pca-embedding": (PcaEmbedding, _pca, _pca_back),
}


def to_document(obj):
    """Plain-dict document for a supported object."""
    for kind, (cls, dump, _) in _KINDS.items():
        if isinstance(obj, cls):
            return {"format": PREFIX + kind, "version": VERSION, "data": dump(obj)}
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def from_document(doc):
    """Inverse of :func:`to_document`; rejects unknown formats and newer versions."""
    if not isinstance(doc, dict) or "format" not in doc or "data" not in doc:
        raise DataError("not a manifold_forecast document")
    fmt = str(doc["format"])
    if not fmt.startswith(PREFIX) or fmt[len(PREFIX):] not in _KINDS:
        raise DataError(f"unknown document format {fmt!r}")
    if int(doc.get("version", 0)) > VERSION:
        raise DataError(f"document version {doc['version']} is newer than supported ({VERSION})")
    try:
        return _KINDS[fmt[len(PREFIX):]][2](doc["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed {fmt} document: {exc}") from None


def save(obj, path, extra=None):
    doc = to_document(obj)
    if extra:
        doc["metadata"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return from_document(doc)
