"""Lloyd's k-means with k-means++ seeding, deterministic under a seed."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def kmeans_plusplus_init(
    points: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    dist_sq = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = dist_sq.sum()
        if total <= 0.0:
            # All remaining points coincide with a centroid; take the first
            # index not already chosen so k distinct slots are still filled.
            remaining = np.setdiff1d(np.arange(n), chosen[:i])
            chosen[i] = remaining[0]
        else:
            chosen[i] = rng.choice(n, p=dist_sq / total)
        dist_sq = np.minimum(dist_sq, ((points - points[chosen[i]]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 100,
    rel_tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Cluster rows of ``points``; returns (assignments, centroids, inertia).

    Iterates until the relative inertia change drops below ``rel_tol`` or
    ``max_iter`` Lloyd steps.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")

    centroids = kmeans_plusplus_init(points, k, rng)
    prev_inertia = np.inf
    assign = np.zeros(n, dtype=np.int64)
    inertia = 0.0
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), assign].sum())
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            # Empty clusters keep their old centroid.
        if prev_inertia == 0.0 or (
            np.isfinite(prev_inertia)
            and abs(prev_inertia - inertia) <= rel_tol * max(prev_inertia, 1e-300)
        ):
            break
        prev_inertia = inertia
    return assign, centroids, inertia
