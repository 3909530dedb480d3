"""K-means training: standard Lloyd iterations and an equal-size variant.

The equal-size variant partitions points into clusters of identical
cardinality. It is used to split a large trained codebook into balanced
groups, whose means become the small derived codebook.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Above this many scalar products the assignment step switches from the
# direct (n, k, d) difference tensor to a blocked GEMM expansion.
_DIRECT_LIMIT = 2**24
_GEMM_BLOCK_ELEMS = 2**24


@dataclass
class Clustering:
    """Result of a clustering run.

    Attributes:
        centroids: (k, d) float32 cluster centers.
        labels: (n,) int32 assignment of each point to a centroid.
        distortion: Sum of squared distances of points to their centroid.
        n_iter: Assignment passes performed.
        history: Distortion after each assignment pass (non-increasing).
    """

    centroids: np.ndarray
    labels: np.ndarray
    distortion: float
    n_iter: int
    history: list = field(default_factory=list)

    @property
    def partition(self):
        """Clusters as index arrays, ascending point index within each."""
        return [np.flatnonzero(self.labels == c) for c in range(len(self.centroids))]


def _as_points(points) -> np.ndarray:
    x = np.ascontiguousarray(points, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d point array, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("cannot cluster an empty dataset")
    return x


def nearest_centroids(x: np.ndarray, centroids: np.ndarray):
    """Assign each row of x to its nearest centroid (squared Euclidean).

    Ties go to the lowest centroid index. Returns (labels int32,
    exact float64 squared distances to the chosen centroid).
    """
    n, d = x.shape
    k = centroids.shape[0]
    if n * k * d <= _DIRECT_LIMIT:
        diff = x[:, None, :].astype(np.float64) - centroids[None, :, :].astype(np.float64)
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        labels = np.argmin(d2, axis=1).astype(np.int32)
    else:
        labels = np.empty(n, dtype=np.int32)
        c_norms = np.einsum("kd,kd->k", centroids, centroids, dtype=np.float64)
        rows = max(1, _GEMM_BLOCK_ELEMS // max(k, 1))
        ct = np.ascontiguousarray(centroids.T)
        for start in range(0, n, rows):
            block = x[start : start + rows]
            cross = block @ ct
            d2 = c_norms[None, :] - 2.0 * cross.astype(np.float64)
            labels[start : start + rows] = np.argmin(d2, axis=1)
    chosen = x.astype(np.float64) - centroids[labels].astype(np.float64)
    dists = np.einsum("nd,nd->n", chosen, chosen)
    return labels, dists


def _sq_dists_to(x: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = x.astype(np.float64) - center.astype(np.float64)
    return np.einsum("nd,nd->n", diff, diff)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ initialization (D^2 sampling)."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float32)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = _sq_dists_to(x, centroids[0])
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            # Inverse-CDF sampling; cheaper than Generator.choice for large n.
            target = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), target))
            idx = min(idx, n - 1)
        centroids[i] = x[idx]
        np.minimum(d2, _sq_dists_to(x, centroids[i]), out=d2)
    return centroids


def _update_centroids(x, labels, dists, k):
    """Means per cluster; empty clusters re-seeded with farthest points."""
    d = x.shape[1]
    sums = np.zeros((k, d), dtype=np.float64)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    centroids = np.empty((k, d), dtype=np.float32)
    nonempty = counts > 0
    centroids[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
    empty = np.flatnonzero(~nonempty)
    if empty.size:
        order = np.argsort(dists)[::-1]
        for slot, cluster in enumerate(empty):
            centroids[cluster] = x[order[slot]]
    return centroids


def kmeans(
    points,
    k: int,
    seed: int = 0,
    max_iters: int = 50,
    tol: float = 1e-6,
    init_centroids: np.ndarray | None = None,
) -> Clustering:
    """Lloyd's k-means with seeded k-means++ initialization.

    Args:
        points: (n, d) training points, n >= k.
        k: Number of centroids.
        seed: Drives initialization; identical inputs give identical output.
        max_iters: Cap on update passes (default 50).
        tol: Stop when relative distortion improvement falls below this.
        init_centroids: Optional (k, d) warm start, bypassing k-means++.

    Returns:
        Clustering with k centroids and the final assignment.
    """
    x = _as_points(points)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    if init_centroids is not None:
        centroids = np.array(init_centroids, dtype=np.float32)
        if centroids.shape != (k, x.shape[1]):
            raise ValueError("init_centroids shape mismatch")
    else:
        centroids = _kmeans_pp_init(x, k, rng)
    history = []
    prev = None
    labels = None
    dists = None
    for _ in range(max_iters):
        labels, dists = nearest_centroids(x, centroids)
        distortion = float(dists.sum())
        history.append(distortion)
        if prev is not None and prev - distortion <= tol * max(prev, 1e-30):
            break
        prev = distortion
        centroids = _update_centroids(x, labels, dists, k)
    else:
        # Hit the iteration cap after an update: sync labels to the
        # final centroids so the returned assignment is consistent.
        labels, dists = nearest_centroids(x, centroids)
        history.append(float(dists.sum()))
    return Clustering(
        centroids=centroids,
        labels=labels,
        distortion=history[-1],
        n_iter=len(history),
        history=history,
    )


def _capacity_assign(d2: np.ndarray, capacity: int) -> np.ndarray:
    """Fill clusters to capacity, strongest preferences first.

    Preference of a point is its nearest-minus-second-nearest distance;
    points whose best option is much better than the runner-up pick first.
    """
    n, kbar = d2.shape
    if kbar == 1:
        return np.zeros(n, dtype=np.int32)
    two = np.partition(d2, 1, axis=1)[:, :2]
    margin = two[:, 0] - two[:, 1]
    order = np.argsort(margin, kind="stable")
    ranked = np.argsort(d2, axis=1, kind="stable")
    labels = np.empty(n, dtype=np.int32)
    room = np.full(kbar, capacity, dtype=np.int64)
    for p in order:
        for c in ranked[p]:
            if room[c] > 0:
                labels[p] = c
                room[c] -= 1
                break
    return labels


def _swap_pass(d2: np.ndarray, labels: np.ndarray, kbar: int) -> int:
    """Greedy improving swaps between cluster pairs; returns swap count.

    Gain of trading p in a with q in b is
    (d2[p,a] - d2[p,b]) + (d2[q,b] - d2[q,a]); only strictly positive
    trades are taken, so the pass terminates.
    """
    members = [list(np.flatnonzero(labels == c)) for c in range(kbar)]
    best_gain = np.empty((kbar, kbar))
    best_point = np.empty((kbar, kbar), dtype=np.int64)

    def rebuild_row(a):
        rows = d2[members[a]]
        g = rows[:, a, None] - rows
        am = np.argmax(g, axis=0)
        best_gain[a] = g[am, np.arange(kbar)]
        best_point[a] = np.asarray(members[a])[am]

    for a in range(kbar):
        rebuild_row(a)
    swaps = 0
    while True:
        gain = best_gain + best_gain.T
        np.fill_diagonal(gain, -np.inf)
        a, b = np.unravel_index(np.argmax(gain), gain.shape)
        if gain[a, b] <= 1e-9:
            break
        p, q = int(best_point[a, b]), int(best_point[b, a])
        members[a].remove(p)
        members[b].remove(q)
        members[a].append(q)
        members[b].append(p)
        labels[p], labels[q] = b, a
        rebuild_row(a)
        rebuild_row(b)
        swaps += 1
    return swaps


def kmeans_same_size(points, kbar: int, seed: int = 0, max_iters: int = 50) -> Clustering:
    """Cluster points into kbar groups of exactly equal size.

    Initialization is seeded k-means++; points are then assigned in
    preference order (most confident first) subject to per-cluster
    capacity, and refined by swapping point pairs between clusters while
    any swap lowers total distortion. Centroids are recomputed as exact
    cluster means between swap passes.

    Args:
        points: (n, d) points with n divisible by kbar.
        kbar: Number of clusters.
        seed: Initialization seed.
        max_iters: Cap on swap-refinement passes.

    Raises:
        ValueError: n not divisible by kbar, or fewer points than clusters.
    """
    x = _as_points(points)
    n = x.shape[0]
    if kbar < 1:
        raise ValueError(f"kbar must be >= 1, got {kbar}")
    if n % kbar != 0:
        raise ValueError(f"point count {n} not divisible by cluster count {kbar}")
    size = n // kbar
    if size == 1:
        # One point per cluster: the identity assignment is optimal.
        labels = np.arange(n, dtype=np.int32)
        return Clustering(
            centroids=x.copy(), labels=labels, distortion=0.0, n_iter=0, history=[0.0]
        )
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, kbar, rng)
    d2 = _pairwise_sq(x, centroids)
    labels = _capacity_assign(d2, size)
    history = []
    n_iter = 0
    for _ in range(max_iters):
        centroids = _cluster_means(x, labels, kbar)
        d2 = _pairwise_sq(x, centroids)
        history.append(float(d2[np.arange(n), labels].sum()))
        n_iter += 1
        if _swap_pass(d2, labels, kbar) == 0:
            break
    centroids = _cluster_means(x, labels, kbar)
    distortion = _sq_dists_rowwise(x, centroids[labels])
    return Clustering(
        centroids=centroids,
        labels=labels,
        distortion=distortion,
        n_iter=n_iter,
        history=history,
    )


def _pairwise_sq(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    n, d = x.shape
    k = centroids.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    c64 = centroids.astype(np.float64)
    rows = max(1, _DIRECT_LIMIT // max(k * d, 1))
    for start in range(0, n, rows):
        block = x[start : start + rows].astype(np.float64)
        diff = block[:, None, :] - c64[None, :, :]
        out[start : start + rows] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _cluster_means(x: np.ndarray, labels: np.ndarray, kbar: int) -> np.ndarray:
    sums = np.zeros((kbar, x.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=kbar)
    return (sums / counts[:, None]).astype(np.float32)


def _sq_dists_rowwise(x: np.ndarray, assigned: np.ndarray) -> float:
    diff = x.astype(np.float64) - assigned.astype(np.float64)
    return float(np.einsum("nd,nd->n", diff, diff).sum())
