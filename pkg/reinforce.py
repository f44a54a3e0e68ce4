"""
REINFORCE updates for cluster centroids.

Each training sample yields a reward (+1 when the classifier's top seen
class is right, -1 otherwise), a continuous score z (probability of the
true class) and a match probability p derived from the weight of the
closest centroid. The closest centroid then moves by

    delta = alpha * r * (z - p) * (psi - c)

with the baseline fixed at zero.
"""
import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import expit

from clustering import assign
from errors import OutOfRange, ShapeMismatch
from neural import check_distribution
from representation import cluster_weights

DEFAULT_SCHEDULE = ((0, 0.1), (1000, 0.01), (2000, 0.001))


def parse_schedule(text):
    """'0:0.1,1000:0.01' -> ((0, 0.1), (1000, 0.01))."""
    pieces = []
    for part in str(text).split(","):
        start, sep, alpha = part.strip().partition(":")
        if not sep:
            raise ValueError(f"schedule entry '{part.strip()}' is not start:alpha")
        pieces.append((int(start), float(alpha)))
    return tuple(pieces)


def format_schedule(schedule):
    return ",".join(f"{start}:{alpha!r}" for start, alpha in schedule)


class RLConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    total_iterations: int = Field(10000, ge=1)
    schedule: tuple[tuple[int, float], ...] = DEFAULT_SCHEDULE
    log_every: int = Field(100, ge=1)

    @field_validator("schedule", mode="before")
    @classmethod
    def _parse(cls, value):
        return parse_schedule(value) if isinstance(value, str) else value

    @field_validator("schedule")
    @classmethod
    def _check(cls, value):
        if not value or value[0][0] != 0:
            raise ValueError("schedule must start at iteration 0")
        starts = [start for start, _ in value]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("schedule boundaries must be strictly increasing")
        if any(not (alpha > 0 and math.isfinite(alpha)) for _, alpha in value):
            raise ValueError("every alpha must be a positive finite number")
        return value


@dataclass(frozen=True)
class ReinforceStep:
    reward: int
    score: float
    p: float
    delta: np.ndarray
    cluster: int


def schedule_alpha(config, iteration):
    if not 0 <= iteration < config.total_iterations:
        raise OutOfRange(f"iteration {iteration} outside [0, {config.total_iterations})")
    starts = [start for start, _ in config.schedule]
    return config.schedule[bisect_right(starts, iteration) - 1][1]


def reward(y_hat, y_true_index):
    """+1 if the top class (lowest index on ties) is the true one, else -1."""
    probs = check_distribution(y_hat)[0]
    return 1 if int(np.argmax(probs)) == y_true_index else -1


def classification_score(y_hat, y_true_index):
    return float(check_distribution(y_hat)[0][y_true_index])


def match_probability(eta_closest):
    """p = 2 * (1 - logistic(eta))."""
    return float(2.0 * (1.0 - expit(eta_closest)))


def centroid_update(alpha, r, z, p, psi, c_closest):
    psi = np.asarray(psi, dtype=np.float64)
    c_closest = np.asarray(c_closest, dtype=np.float64)
    if psi.shape != c_closest.shape:
        raise ShapeMismatch(f"psi {psi.shape} vs centroid {c_closest.shape}")
    if alpha < 0:
        raise OutOfRange("alpha must be non-negative")
    if abs(r) != 1:
        raise OutOfRange(f"reward must be +1 or -1, got {r}")
    return alpha * r * (z - p) * (psi - c_closest)


def reinforce_step(model, psi, y_hat, true_index, alpha):
    """
    Apply one update to the centroid closest to `psi`, in place.

    Returns the ReinforceStep that was applied.
    """
    cluster, _ = assign(model, psi)
    eta = cluster_weights(model, psi).weights[cluster]
    r = reward(y_hat, true_index)
    z = classification_score(y_hat, true_index)
    p = match_probability(eta)
    delta = centroid_update(alpha, r, z, p, psi, model.vectors[cluster])
    model.vectors[cluster] += delta
    return ReinforceStep(reward=r, score=z, p=p, delta=delta, cluster=cluster)
