"""Seeded k-means (k-means++ init, Lloyd iterations) for pseudo-labeling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .numerics import as_matrix

DEFAULT_MAX_ITERS = 50
DEFAULT_RESTARTS = 10


@dataclass
class KMeansModel:
    centroids: np.ndarray          # (k, D)
    assignments: np.ndarray        # (N,) cluster index per training point
    objective: float               # mean squared distance to assigned centroid
    iterations_run: int
    objective_history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)


def _sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    sq = (
        (points * points).sum(axis=1)[:, None]
        + (centroids * centroids).sum(axis=1)[None, :]
        - 2.0 * points @ centroids.T
    )
    np.maximum(sq, 0.0, out=sq)
    return sq


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            chosen[i] = rng.integers(n)  # all remaining points coincide
        else:
            chosen[i] = rng.choice(n, p=d2 / total)
        d2 = np.minimum(d2, ((points - points[chosen[i]]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, k: int, max_iters: int):
    n = len(x)
    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        sq = _sq_dist(x, centroids)
        new_assign = sq.argmin(axis=1)
        _repair_empty(x, centroids, new_assign, sq, k)
        for j in range(k):
            centroids[j] = x[new_assign == j].mean(axis=0)
        objective = float(_sq_dist(x, centroids)[np.arange(n), new_assign].mean())
        if history and objective > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise NumericError(
                f"k-means objective increased: {history[-1]!r} -> {objective!r}"
            )
        history.append(objective)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
    # final nearest-centroid pass so stored assignments match the centroids
    final_assign = _sq_dist(x, centroids).argmin(axis=1)
    objective = float(_sq_dist(x, centroids)[np.arange(n), final_assign].mean())
    return centroids, final_assign, objective, iterations, history


def kmeans_fit(points, k: int, max_iters: int = DEFAULT_MAX_ITERS,
               seed: int = 0, restarts: int = DEFAULT_RESTARTS) -> KMeansModel:
    """Cluster rows of `points` into k groups.

    Runs `restarts` independent k-means++ seedings from one seeded RNG and
    keeps the run with the lowest objective (deterministic per arguments).
    Each run stops when assignments stop changing or after `max_iters` Lloyd
    iterations; an emptied cluster is repaired by moving the point farthest
    from its assigned centroid into it. The objective (mean squared distance
    to the assigned centroid) is checked to be non-increasing every step.
    """
    x = as_matrix(points, "points")
    n = len(x)
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > n:
        raise ConfigError(f"k={k} exceeds the number of points ({n})")
    if restarts < 1:
        raise ConfigError(f"restarts must be >= 1, got {restarts}")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        init = _plus_plus_init(x, k, rng)
        result = _lloyd(x, init, k, max_iters)
        if best is None or result[2] < best[2]:
            best = result
    centroids, assignments, objective, iterations, history = best
    return KMeansModel(
        centroids=centroids,
        assignments=assignments,
        objective=objective,
        iterations_run=iterations,
        objective_history=history,
    )


def _repair_empty(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray,
                  sq: np.ndarray, k: int) -> None:
    counts = np.bincount(assign, minlength=k)
    if np.all(counts > 0):
        return
    current = sq[np.arange(len(x)), assign].copy()
    for j in np.flatnonzero(counts == 0):
        donors = np.flatnonzero(counts[assign] > 1)
        if not len(donors):
            break
        far = donors[current[donors].argmax()]
        counts[assign[far]] -= 1
        assign[far] = j
        counts[j] = 1
        current[far] = 0.0


def assign(model: KMeansModel, points) -> np.ndarray:
    """Nearest-centroid index per row; distance ties go to the smaller index."""
    x = as_matrix(points, "points")
    if x.shape[1] != model.centroids.shape[1]:
        raise ShapeError(
            f"points have dim {x.shape[1]}, centroids have dim {model.centroids.shape[1]}"
        )
    return _sq_dist(x, model.centroids).argmin(axis=1)
