"""
Prediction for unseen and mixed label spaces.

Unseen-class embeddings are first rectified: each embedding is pulled toward
its Euclidean k-nearest seen-class embeddings, weighted by cosine
similarity. A ZSL query is matched to the rectified unseen set by cosine
similarity. Queries come either from the seen-class probabilities (the
projected embedding of the top seen class, or the probability-weighted
blend) or directly from the classifier's computed semantic output.
"""
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.distance import cdist
from sklearn.metrics.pairwise import cosine_similarity

from errors import EmptyInput, EmptyNeighborSet, EmptyUnseenSet, ShapeMismatch, ZeroVector
from neural import check_distribution
from utils import get_logger

log = get_logger(__name__)

SEEN = "seen"
UNSEEN = "unseen"


@dataclass(frozen=True)
class RectifiedEmbedding:
    class_label: str
    vector: np.ndarray
    source: str = UNSEEN


class GateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    tau: float = Field(0.5, gt=0, lt=1)
    tune: bool = False
    target_seen_rate: float = Field(0.95, gt=0, lt=1)
    holdout_fraction: float = Field(0.2, ge=0, lt=1)


# ── Rectification ──────────────────────────────────────────────────

def rectify(target, seen_projected, k_nn, class_label="", source=UNSEEN, exclude=None):
    """
    a' + (1/k) Σ_n cos(a', n) · n over the k Euclidean-nearest seen projections.

    `exclude` drops one row of `seen_projected` (the target's own entry when
    rectifying a seen class).
    """
    target = np.asarray(target, dtype=np.float64)
    neighbors = np.atleast_2d(np.asarray(seen_projected, dtype=np.float64))
    if exclude is not None:
        neighbors = np.delete(neighbors, exclude, axis=0)
    if k_nn < 1 or neighbors.shape[0] < k_nn:
        raise EmptyNeighborSet(
            f"rectification needs {k_nn} neighbour(s), only {neighbors.shape[0]} seen projection(s) available"
        )
    if neighbors.shape[1] != target.size:
        raise ShapeMismatch(f"target of length {target.size} vs neighbours of length {neighbors.shape[1]}")
    if not np.any(target):
        raise ZeroVector(f"cannot rectify the zero vector of '{class_label}'")

    order = np.argsort(cdist(target[None, :], neighbors)[0], kind="stable")[:k_nn]
    nearest = neighbors[order]
    if not np.all(np.any(nearest, axis=1)):
        raise ZeroVector("a neighbouring seen projection is the zero vector")
    cosines = cosine_similarity(target[None, :], nearest)[0]
    vector = target + (cosines[:, None] * nearest).sum(axis=0) / k_nn
    return RectifiedEmbedding(class_label=class_label, vector=vector, source=source)


def rectify_all(projected, seen_projected, k_nn):
    """
    Rectify every entry of a label -> a'(y) mapping.

    `seen_projected` maps seen labels to a'(y); a label present there is
    excluded from its own neighbour set.
    """
    seen_labels = list(seen_projected)
    seen_matrix = np.vstack([seen_projected[label] for label in seen_labels])
    result = {}
    for label, vector in projected.items():
        own = seen_labels.index(label) if label in seen_projected else None
        result[label] = rectify(
            vector, seen_matrix, k_nn, class_label=label,
            source=SEEN if own is not None else UNSEEN, exclude=own,
        )
    return result


def plain_embeddings(projected):
    """Un-rectified entries, used when rectification is switched off."""
    return {
        label: RectifiedEmbedding(class_label=label, vector=np.asarray(vector, dtype=np.float64))
        for label, vector in projected.items()
    }


# ── ZSL ────────────────────────────────────────────────────────────

def _queries(y_hat, seen_projected, soft_query):
    probs = check_distribution(y_hat)
    seen_projected = np.atleast_2d(np.asarray(seen_projected, dtype=np.float64))
    if probs.shape[1] != seen_projected.shape[0]:
        raise ShapeMismatch(
            f"{probs.shape[1]} seen probabilities vs {seen_projected.shape[0]} seen projections"
        )
    if soft_query:
        return probs @ seen_projected
    return seen_projected[np.argmax(probs, axis=1)]


def nearest_unseen(queries, unseen_rectified):
    """
    Unseen label per query row, by cosine similarity.

    Ties resolve to the lexicographically smallest label.
    """
    if not unseen_rectified:
        raise EmptyUnseenSet("no unseen classes to predict from")
    entries = sorted(
        unseen_rectified.values() if isinstance(unseen_rectified, dict) else unseen_rectified,
        key=lambda e: e.class_label,
    )
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    targets = np.vstack([e.vector for e in entries])
    if queries.shape[1] != targets.shape[1]:
        raise ShapeMismatch(f"queries of length {queries.shape[1]} vs embeddings of length {targets.shape[1]}")
    if not np.all(np.any(queries, axis=1)):
        raise ZeroVector("ZSL query is the zero vector")
    similarity = cosine_similarity(queries, targets)
    return [entries[i].class_label for i in np.argmax(similarity, axis=1)]


def zsl_predict_batch(y_hat, seen_projected, unseen_rectified, soft_query=False):
    """Unseen label per row of seen-class probabilities."""
    if not unseen_rectified:
        raise EmptyUnseenSet("no unseen classes to predict from")
    return nearest_unseen(_queries(y_hat, seen_projected, soft_query), unseen_rectified)


def zsl_predict(y_hat, seen_projected, unseen_rectified, soft_query=False):
    return zsl_predict_batch(np.atleast_2d(y_hat), seen_projected, unseen_rectified, soft_query)[0]


# ── GZSL ───────────────────────────────────────────────────────────

def bias_gate(y_hat, config):
    """'seen' when the top seen-class probability reaches tau."""
    probs = check_distribution(y_hat)[0]
    return SEEN if probs.max() >= config.tau else UNSEEN


def gzsl_predict_batch(y_hat, gate, seen_labels, seen_projected, unseen_rectified, soft_query=False,
                       queries=None):
    """
    (route, label) per row.

    `queries` holds one precomputed query per row; when given, unseen-route
    rows are matched with those instead of queries built from `y_hat`.
    """
    probs = check_distribution(y_hat)
    seen_labels = list(seen_labels)
    if len(seen_labels) != probs.shape[1]:
        raise ShapeMismatch(f"{len(seen_labels)} seen labels vs {probs.shape[1]} probabilities")
    routed_seen = probs.max(axis=1) >= gate.tau
    unseen_rows = np.flatnonzero(~routed_seen)
    if not unseen_rows.size:
        unseen_labels = []
    elif queries is not None:
        unseen_labels = nearest_unseen(np.atleast_2d(queries)[unseen_rows], unseen_rectified)
    else:
        unseen_labels = zsl_predict_batch(probs[unseen_rows], seen_projected, unseen_rectified, soft_query)
    fill = iter(unseen_labels)
    return [
        (SEEN, seen_labels[int(np.argmax(row))]) if seen else (UNSEEN, next(fill))
        for row, seen in zip(probs, routed_seen)
    ]


def gzsl_predict(y_hat, gate, seen_labels, seen_projected, unseen_rectified, soft_query=False):
    return gzsl_predict_batch(
        np.atleast_2d(y_hat), gate, seen_labels, seen_projected, unseen_rectified, soft_query
    )[0]


def tune_tau(max_probabilities, target_seen_rate):
    """
    Threshold that routes about `target_seen_rate` of held-out seen
    instances to the seen side: the (1 - rate) quantile, kept inside (0, 1).
    """
    values = np.asarray(max_probabilities, dtype=np.float64)
    if values.size == 0:
        raise EmptyInput("no held-out probabilities to tune the gate on")
    tau = float(np.quantile(values, 1.0 - target_seen_rate))
    tau = min(max(tau, 1e-6), 1.0 - 1e-6)
    log.info(f"Gate threshold tuned to {tau:.4f} (target seen rate {target_seen_rate:.0%})")
    return tau
