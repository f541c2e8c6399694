"""Lloyd's K-means with k-means++ seeding and a point-transfer polish, plus an
exhaustive 2-partition oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    wcss: float
    n_iter: int
    history: list = field(default_factory=list)

    def assignment(self) -> np.ndarray:
        return assignment_matrix(self.labels, len(self.centroids))


def assignment_matrix(labels, n_clusters) -> np.ndarray:
    """Hard ``N×C`` 0/1 matrix; column ``c`` has a single 1 in row ``labels[c]``."""
    labels = np.asarray(labels)
    cr = np.zeros((n_clusters, labels.size))
    cr[labels, np.arange(labels.size)] = 1.0
    return cr


def within_cluster_ss(X, labels, n_clusters=None) -> float:
    X = np.asarray(X, dtype=np.float64)
    total = 0.0
    for k in np.unique(labels):
        members = X[labels == k]
        total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


def _sq_dists(X, centroids):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _nearest(X, centroids, current):
    """Closest centroid per point; a point tied with its current centroid stays put."""
    d = _sq_dists(X, centroids)
    best = np.argmin(d, axis=1)
    stay = d[np.arange(len(X)), current] <= d[np.arange(len(X)), best]
    return np.where(stay, current, best)


def _plus_plus(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            remaining = np.setdiff1d(np.arange(n), centers)
            nxt = int(rng.choice(remaining))
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[[nxt]])[:, 0])
    return X[centers].copy()


def _repair_empty(X, labels, centroids, k):
    """Give every empty cluster the point farthest from its own centroid."""
    counts = np.bincount(labels, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        dist = ((X - centroids[labels]) ** 2).sum(1)
        dist[counts[labels] <= 1] = -1.0
        far = int(np.argmax(dist))
        counts[labels[far]] -= 1
        labels[far] = empty
        counts[empty] = 1
        centroids[empty] = X[far]
    return labels


def _lloyd(X, k, rng, max_iter):
    centroids = _plus_plus(X, k, rng)
    labels = np.argmin(_sq_dists(X, centroids), axis=1)
    history = []
    for it in range(1, max_iter + 1):
        labels = _repair_empty(X, labels, centroids, k)
        centroids = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
        wcss = float(((X - centroids[labels]) ** 2).sum())
        if history and wcss > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise RuntimeError(f"WCSS increased from {history[-1]} to {wcss} at iteration {it}")
        history.append(wcss)
        new_labels = _nearest(X, centroids, labels)
        if np.array_equal(new_labels, labels) or it == max_iter:
            break
        labels = new_labels
    labels, centroids = _hartigan(X, labels, centroids, k, history)
    return KMeansResult(labels, centroids, history[-1], it, history)


def _hartigan(X, labels, centroids, k, history, tol=1e-12):
    """Single-point transfers that lower the WCSS, until none is left.

    Lloyd stops at any partition where each point is nearest its own
    centroid; moving a point also shifts both centroids, which this pass
    accounts for exactly.
    """
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(float)
    moved = True
    while moved:
        moved = False
        for i in range(len(X)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d = ((centroids - X[i]) ** 2).sum(1)
            gain = counts / (counts + 1.0) * d
            loss = counts[a] / (counts[a] - 1.0) * d[a]
            gain[a] = np.inf
            b = int(np.argmin(gain))
            if gain[b] < loss - tol * max(1.0, loss):
                centroids[a] = (counts[a] * centroids[a] - X[i]) / (counts[a] - 1.0)
                centroids[b] = (counts[b] * centroids[b] + X[i]) / (counts[b] + 1.0)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moved = True
        if moved:
            centroids = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
            wcss = float(((X - centroids[labels]) ** 2).sum())
            if wcss > history[-1] + 1e-9 * max(1.0, history[-1]):
                raise RuntimeError(f"WCSS increased from {history[-1]} to {wcss} during point transfers")
            history.append(wcss)
    return labels, centroids


def kmeans_cluster(signatures, n_clusters: int, seed=0, max_iter=300, n_init=10) -> KMeansResult:
    """Cluster the rows of ``signatures`` into ``n_clusters`` groups.

    Runs ``n_init`` seeded restarts and keeps the lowest within-cluster sum of
    squares (earliest restart on ties).
    """
    X = np.asarray(signatures, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError(f"signatures must be a 2-D array, got shape {X.shape}")
    if not 1 <= n_clusters <= len(X):
        raise ContractError(f"need 1 <= N <= C, got N={n_clusters}, C={len(X)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(X, n_clusters, rng, max_iter)
        if best is None or res.wcss < best.wcss:
            best = res
    return best


def exhaustive_two_partition(X) -> tuple:
    """Optimal WCSS over every split of the rows into two nonempty groups."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    best, best_labels = np.inf, None
    for bits in itertools.product((0, 1), repeat=n - 1):
        labels = np.array((0,) + bits)
        if labels.all() or not labels.any():
            continue
        w = within_cluster_ss(X, labels)
        if w < best:
            best, best_labels = w, labels
    return best, best_labels
