"""
The CLASTER representation of a visual feature.

    psi   = x ++ phi(x)
    eta_j = min-max normalized 1/||psi - c_j||
    omega = psi + sum_j eta_j * c_j
"""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from clustering import VisualSemanticPoint
from errors import ShapeMismatch
from neural import mlp_forward

INVERSE_CAP = 1e12


@dataclass(frozen=True)
class ClusterWeights:
    distances: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class ClasterRepresentation:
    psi: VisualSemanticPoint
    weights: ClusterWeights
    omega: np.ndarray


def _rows(values, dim, what):
    array = np.asarray(values, dtype=np.float64)
    single = array.ndim == 1
    batch = array[None, :] if single else array
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ShapeMismatch(f"{what}: expected length {dim}, got shape {array.shape}")
    return batch, single


# ── psi ────────────────────────────────────────────────────────────

def build_psi_batch(mapper, features):
    """Rows x_i ++ phi(x_i) for a (N, d_v) feature matrix."""
    x, _ = _rows(features, mapper.in_dim, "visual feature")
    return np.hstack([x, mlp_forward(mapper, x)])


def build_psi(mapper, x):
    x, _ = _rows(x, mapper.in_dim, "visual feature")
    return VisualSemanticPoint(visual_part=x[0], semantic_part=mlp_forward(mapper, x[0]))


# ── Weights ────────────────────────────────────────────────────────

def _normalized_inverse(distances):
    """
    Min-max normalization of inverse distances, row-wise.

    Returns (weights, capped mask, argmin index, argmax index, span). Rows
    whose inverses are all equal get all-ones weights and span 0.
    """
    capped = distances <= 1.0 / INVERSE_CAP
    with np.errstate(divide="ignore"):
        inverse = np.where(capped, INVERSE_CAP, 1.0 / np.where(capped, 1.0, distances))
    lo = np.argmin(inverse, axis=1)
    hi = np.argmax(inverse, axis=1)
    rows = np.arange(inverse.shape[0])
    span = inverse[rows, hi] - inverse[rows, lo]
    flat = span <= 0
    safe_span = np.where(flat, 1.0, span)
    weights = (inverse - inverse[rows, lo][:, None]) / safe_span[:, None]
    weights[flat] = 1.0
    return np.clip(weights, 0.0, 1.0), capped, lo, hi, np.where(flat, 0.0, span)


def cluster_weights_batch(model, psi):
    """(distances, weights), each (N, k)."""
    batch, _ = _rows(psi, model.dim, "psi")
    distances = cdist(batch, model.vectors)
    weights = _normalized_inverse(distances)[0]
    return distances, weights


def cluster_weights(model, psi):
    psi = psi.joined if isinstance(psi, VisualSemanticPoint) else psi
    distances, weights = cluster_weights_batch(model, psi)
    return ClusterWeights(distances=distances[0], weights=weights[0])


# ── omega ──────────────────────────────────────────────────────────

def claster_omega(model, psi):
    """omega rows for a (N, 2·d_v) psi matrix; returns (omega, weights)."""
    batch, _ = _rows(psi, model.dim, "psi")
    _, weights = cluster_weights_batch(model, batch)
    return batch + weights @ model.vectors, weights


def claster_representation(model, psi):
    point = psi if isinstance(psi, VisualSemanticPoint) else None
    joined = point.joined if point is not None else np.asarray(psi, dtype=np.float64)
    if point is None:
        half = joined.size // 2
        point = VisualSemanticPoint(joined[:half], joined[half:])
    weights = cluster_weights(model, joined)
    omega = joined + weights.weights @ model.vectors
    return ClasterRepresentation(psi=point, weights=weights, omega=omega)


def claster_gradient(model, psi, upstream):
    """
    dLoss/dpsi given dLoss/domega, with centroids held fixed.

    omega depends on psi directly and through eta. Capped inverse
    distances and flat weight rows contribute nothing through eta.
    """
    batch, single = _rows(psi, model.dim, "psi")
    up, _ = _rows(upstream, model.dim, "upstream gradient")
    if up.shape[0] != batch.shape[0]:
        raise ShapeMismatch("psi and upstream gradient hold different row counts")

    centroids = model.vectors
    diff = batch[:, None, :] - centroids[None, :, :]
    distances = np.linalg.norm(diff, axis=2)
    eta, capped, lo, hi, span = _normalized_inverse(distances)

    rows = np.arange(batch.shape[0])
    active = span > 0
    safe_span = np.where(active, span, 1.0)[:, None]
    score = up @ centroids.T                                   # s_j = g · c_j
    d_inverse = score / safe_span
    d_inverse[rows, lo] += (score * (eta - 1.0)).sum(axis=1) / safe_span[:, 0]
    d_inverse[rows, hi] -= (score * eta).sum(axis=1) / safe_span[:, 0]
    d_inverse[~active] = 0.0
    d_inverse[capped] = 0.0

    # d(1/d)/dpsi = -(psi - c) / d^3
    safe_dist = np.where(capped, 1.0, distances)
    coef = -d_inverse / safe_dist ** 3
    grad = up + np.einsum("nk,nkd->nd", coef, diff)
    return grad[0] if single else grad
