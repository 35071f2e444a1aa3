"""k-means++ seeding and Lloyd iterations shared by the semantic and acoustic quantizers."""

from __future__ import annotations

import numpy as np


class InsufficientDataError(ValueError):
    pass


def sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared L2 distances, shape ``(len(x), len(centroids))``."""
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def nearest(x: np.ndarray, centroids: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Index of the nearest centroid per row; ties go to the lowest index."""
    x = np.atleast_2d(x)
    out = np.empty(len(x), dtype=np.int64)
    for i in range(0, len(x), chunk):
        out[i : i + chunk] = np.argmin(sq_distances(x[i : i + chunk], centroids), axis=1)
    return out


def _fast_sq_distances(x, x_sq, centroids):
    d = x_sq[:, None] - 2.0 * (x @ centroids.T) + np.sum(centroids**2, axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than k; duplicates are split later by Lloyd re-seeding
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[j] = x[idx]
        closest = np.minimum(closest, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans(x: np.ndarray, k: int, seed, max_iter: int = 50, tol: float = 1e-6) -> np.ndarray:
    """Cluster rows of ``x`` into ``k`` centroids.

    Lloyd iterations stop after ``max_iter`` rounds or once the Frobenius
    norm of the centroid update falls below ``tol`` times the centroid norm.
    An empty cluster is re-seeded at the point farthest from its centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < k:
        raise InsufficientDataError(f"need at least {k} vectors to train {k} centroids, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng)
    x_sq = np.sum(x**2, axis=1)
    for _ in range(max_iter):
        d = _fast_sq_distances(x, x_sq, centroids)
        assign = np.argmin(d, axis=1)
        residual = d[np.arange(len(x)), assign]
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for j in np.flatnonzero(~filled):
            far = int(np.argmax(residual))
            new[j] = x[far]
            residual[far] = 0.0
        shift = np.linalg.norm(new - centroids)
        scale = max(np.linalg.norm(centroids), 1e-12)
        centroids = new
        if shift / scale < tol:
            break
    return centroids
