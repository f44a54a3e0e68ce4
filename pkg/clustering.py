"""
k-means over joint visual-semantic points, plus cluster quality metrics.
"""
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus
from sklearn.preprocessing import StandardScaler

from errors import ConfigError, EmptyInput, OutOfRange, ShapeMismatch, TooFewPoints
from utils import ensure_finite, get_logger

log = get_logger(__name__)

INIT_MODES = ("plusplus", "forgy", "random_assign")
MAX_ITER = 300


# ── Domain Types ───────────────────────────────────────────────────

@dataclass(frozen=True)
class VisualSemanticPoint:
    visual_part: np.ndarray
    semantic_part: np.ndarray

    @property
    def joined(self):
        return np.concatenate([self.visual_part, self.semantic_part])


@dataclass(frozen=True)
class Centroid:
    index: int
    vector: np.ndarray


@dataclass
class ClusterModel:
    vectors: np.ndarray                     # (k, D), row j is c_j
    degenerate: bool = False
    objective_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.shape[0] < 1:
            raise OutOfRange("a cluster model needs at least one centroid")
        ensure_finite(self.vectors, "centroids")

    @property
    def k(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def centroids(self):
        return [Centroid(j, self.vectors[j]) for j in range(self.k)]

    def copy(self):
        return ClusterModel(self.vectors.copy(), self.degenerate, list(self.objective_trace))


@dataclass
class PurityReport:
    purity: float
    histogram: pd.DataFrame     # rows: classes, columns: cluster index, values: counts
    n_points: int


# ── Assignment ─────────────────────────────────────────────────────

def _check_points(model, points):
    points = np.asarray(points, dtype=np.float64)
    batch = points[None, :] if points.ndim == 1 else points
    if batch.ndim != 2 or batch.shape[1] != model.dim:
        raise ShapeMismatch(f"points of shape {points.shape} vs centroids of length {model.dim}")
    return batch


def assign_all(model, points):
    """Closest centroid per row; ties go to the lowest index."""
    batch = _check_points(model, points)
    distances = cdist(batch, model.vectors)
    indices = np.argmin(distances, axis=1)
    return indices, distances[np.arange(batch.shape[0]), indices]


def assign(model, point):
    point = np.asarray(point, dtype=np.float64)
    if point.ndim != 1:
        raise ShapeMismatch("assign takes a single point")
    indices, distances = assign_all(model, point)
    return int(indices[0]), float(distances[0])


def kmeans_objective(points, centroids, assignments):
    """Sum of squared distances from each point to its assigned centroid."""
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    diff = points - centroids[np.asarray(assignments)]
    return float(np.sum(diff * diff))


# ── Lloyd ──────────────────────────────────────────────────────────

def _nearest(points, centers):
    return np.argmin(cdist(points, centers), axis=1)


def _means(points, labels, k, fallback):
    """Per-cluster means; clusters with no points keep their `fallback` row."""
    centers = fallback.copy()
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts):
        centers[j] = points[labels == j].mean(axis=0)
    return centers, np.flatnonzero(counts == 0)


def _recompute(points, labels, centers):
    k = centers.shape[0]
    centers, empty = _means(points, labels, k, centers)
    if empty.size:
        # re-seed empty clusters from the points farthest from their own centroid
        spread = np.linalg.norm(points - centers[labels], axis=1)
        farthest = np.argsort(-spread, kind="stable")
        for j, idx in zip(empty, farthest):
            centers[j] = points[idx]
        log.debug(f"Re-seeded {empty.size} empty cluster(s)")
    return centers


def _lloyd(points, centers, max_iter):
    labels = _nearest(points, centers)
    trace = [kmeans_objective(points, centers, labels)]
    for _ in range(max_iter):
        centers = _recompute(points, labels, centers)
        new_labels = _nearest(points, centers)
        objective = kmeans_objective(points, centers, new_labels)
        if objective > trace[-1] * (1 + 1e-12) + 1e-12:
            log.warning(f"⚠️  k-means objective rose from {trace[-1]:.6g} to {objective:.6g}")
        trace.append(objective)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels, trace


def _initial_centers(points, k, mode, rng):
    if mode == "plusplus":
        centers, _ = kmeans_plusplus(points, k, random_state=int(rng.integers(2**31 - 1)))
        return centers
    indices = rng.choice(points.shape[0], size=k, replace=False)
    return points[indices].copy()


def _random_partition(n, k, rng):
    # balanced so that no cluster starts empty when k <= n
    return rng.permutation(np.arange(n) % k)


def kmeans_fit(points, k, seed=0, mode="plusplus", n_init=1, standardize=False,
               max_iter=MAX_ITER):
    """
    Fit k centroids to `points`.

    Args:
        points: (N, D) array of joined visual-semantic vectors
        k: number of clusters
        seed: seed for initialization; equal seeds give equal models
        mode: "plusplus", "forgy" (k distinct random points) or
              "random_assign" (a random balanced partition, no Lloyd steps)
        n_init: restarts; the lowest objective wins, earliest on ties
        standardize: partition z-scored points; centroids are still means
                     in the original space

    Returns:
        ClusterModel
    """
    if mode not in INIT_MODES:
        raise ConfigError(f"unknown k-means init '{mode}', expected one of {INIT_MODES}",
                          key="kmeans_init")
    if k < 1:
        raise OutOfRange("k must be at least 1")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.size == 0 or points.shape[0] < k:
        raise TooFewPoints(f"{points.shape[0]} point(s) cannot form {k} clusters")
    ensure_finite(points, "k-means input")

    if k > 1 and np.all(points == points[0]):
        log.warning(f"⚠️  All {points.shape[0]} points are identical; returning {k} copies")
        return ClusterModel(np.repeat(points[:1], k, axis=0), degenerate=True, objective_trace=[0.0])

    space = StandardScaler().fit_transform(points) if standardize else points
    rng = np.random.default_rng(seed)
    runs = 1 if mode == "random_assign" else max(1, n_init)

    best = None
    for _ in range(runs):
        if mode == "random_assign":
            labels = _random_partition(points.shape[0], k, rng)
            centers, _ = _means(space, labels, k, np.zeros((k, space.shape[1])))
            trace = [kmeans_objective(space, centers, labels)]
        else:
            centers, labels, trace = _lloyd(space, _initial_centers(space, k, mode, rng), max_iter)
        if best is None or trace[-1] < best[2][-1]:
            best = (centers, labels, trace)

    centers, labels, trace = best
    if standardize:
        fallback = StandardScaler().fit(points).inverse_transform(centers)
    else:
        fallback = centers
    vectors, _ = _means(points, labels, k, fallback)
    log.debug(f"k-means ({mode}, k={k}): objective {trace[-1]:.6g} after {len(trace) - 1} step(s)")
    return ClusterModel(vectors, objective_trace=trace)


# ── Quality ────────────────────────────────────────────────────────

def _contingency(assignments, labels, k):
    assignments = np.asarray(assignments)
    labels = np.asarray(labels, dtype=object)
    if assignments.size == 0:
        raise EmptyInput("no points to score")
    if assignments.shape != labels.shape:
        raise ShapeMismatch(f"{assignments.size} assignments vs {labels.size} labels")
    if np.any(assignments < 0) or np.any(assignments >= k):
        raise OutOfRange(f"cluster index outside [0, {k})")
    table = pd.crosstab(
        pd.Series(labels, name="class"),
        pd.Series(assignments.astype(int), name="cluster"),
    )
    return table.reindex(columns=range(k), fill_value=0)


def purity(assignments, labels, k):
    """(1/N) Σ_j max_class |cluster_j ∩ class|."""
    table = _contingency(assignments, labels, k)
    n = int(table.to_numpy().sum())
    return PurityReport(
        purity=float(table.max(axis=0).sum()) / n,
        histogram=table,
        n_points=n,
    )


def cluster_histogram(assignments, labels, k):
    """Per-class share of instances in each cluster, in percent; rows sum to 100."""
    table = _contingency(assignments, labels, k)
    return table.div(table.sum(axis=1), axis=0) * 100.0
