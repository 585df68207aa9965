#!/usr/bin/env python3
"""
k-means++ seeding and Lloyd iterations.

Shared by the GMM initializer (gmc.py) and the KMeans+KNN baseline
(domain_selectors.py). Distances are squared Euclidean throughout; argmin ties
go to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from soyo_core import InsufficientSamplesError, RngStream, get_logger

logger = get_logger(__name__)

LLOYD_MAX_ITER = 100
LLOYD_TOL = 1e-6


def squared_distances(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """n x m matrix of squared Euclidean distances."""
    diff = X[:, None, :] - centers[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)


def kmeans_plusplus_init(X: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    """Pick k rows of X as initial centers by D^2 sampling."""
    n = X.shape[0]
    if n < k:
        raise InsufficientSamplesError(f"k-means++ needs at least {k} rows, got {n}")
    gen = rng.generator()
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[gen.integers(0, n)]
    closest = squared_distances(X, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # All remaining mass sits on existing centers; fall back to uniform.
            idx = int(gen.integers(0, n))
        else:
            u = gen.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), u, side="right"))
            idx = min(idx, n - 1)
        centers[i] = X[idx]
        closest = np.minimum(closest, squared_distances(X, centers[i:i + 1])[:, 0])
    return centers


@dataclass(frozen=True)
class LloydResult:
    centers: np.ndarray
    labels: np.ndarray
    n_iter: int


def lloyd_kmeans(
    X: np.ndarray,
    k: int,
    rng: RngStream,
    max_iter: int = LLOYD_MAX_ITER,
    tol: float = LLOYD_TOL,
) -> LloydResult:
    """Lloyd's algorithm from k-means++ seeds.

    Stops once no center moves more than `tol` (Euclidean) or after max_iter
    rounds. An emptied cluster is reseeded at the row farthest from its
    assigned center.
    """
    centers = kmeans_plusplus_init(X, k, rng)
    labels = np.zeros(X.shape[0], dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dist = squared_distances(X, centers)
        labels = np.argmin(dist, axis=1)
        new_centers = np.empty_like(centers)
        for j in range(k):
            mask = labels == j
            if np.any(mask):
                new_centers[j] = X[mask].mean(axis=0)
            else:
                far = int(np.argmax(dist[np.arange(X.shape[0]), labels]))
                logger.debug("empty cluster %d reseeded at row %d", j, far)
                new_centers[j] = X[far]
        shift = np.sqrt(np.max(np.sum((new_centers - centers) ** 2, axis=1)))
        centers = new_centers
        if shift <= tol:
            break
    labels = np.argmin(squared_distances(X, centers), axis=1)
    return LloydResult(centers=centers, labels=labels, n_iter=n_iter)
