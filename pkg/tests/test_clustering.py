"""k-means and balanced splitting against small hand-checkable instances."""

import itertools

import numpy as np
import pytest

from derivedpq.clustering import (
    kmeans,
    kmeans_same_size,
    nearest_centroids,
)


def lloyd_reference(points, centroids, iters=100):
    """Plain quadratic-loop Lloyd starting from given centroids."""
    points = points.astype(np.float64)
    centroids = centroids.astype(np.float64).copy()
    for _ in range(iters):
        labels = np.array([
            int(np.argmin([np.sum((p - c) ** 2) for c in centroids])) for p in points
        ])
        new = centroids.copy()
        for j in range(len(centroids)):
            members = points[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.allclose(new, centroids):
            break
        centroids = new
    return centroids, labels


class TestNearestCentroids:
    def test_matches_quadratic_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(50, 6)).astype(np.float32)
        c = rng.normal(size=(7, 6)).astype(np.float32)
        labels, dists = nearest_centroids(x, c)
        for i, p in enumerate(x.astype(np.float64)):
            ref = [np.sum((p - cj.astype(np.float64)) ** 2) for cj in c]
            assert labels[i] == int(np.argmin(ref))
            assert dists[i] == pytest.approx(min(ref), rel=1e-12)

    def test_large_input_takes_blocked_path(self):
        # big enough that n*k*d exceeds the direct-path budget
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3000, 32)).astype(np.float32)
        c = rng.normal(size=(256, 32)).astype(np.float32)
        labels, dists = nearest_centroids(x, c)
        # spot check a sample against the quadratic loop
        for i in range(0, 3000, 517):
            ref = [np.sum((x[i].astype(np.float64) - cj) ** 2) for cj in c.astype(np.float64)]
            assert dists[i] <= min(ref) * (1 + 1e-9) + 1e-12
            assert dists[i] == pytest.approx(ref[labels[i]], rel=1e-9)


class TestKMeans:
    def test_two_points_two_clusters(self):
        pts = np.array([[0.0, 0.0], [4.0, 0.0]], dtype=np.float32)
        result = kmeans(pts, 2, seed=0)
        assert sorted(result.centroids[:, 0].tolist()) == [0.0, 4.0]
        assert result.distortion == 0.0
        assert sorted(result.labels.tolist()) == [0, 1]

    def test_k_equals_one_gives_mean(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(100, 3)).astype(np.float32)
        result = kmeans(pts, 1, seed=0)
        np.testing.assert_allclose(result.centroids[0], pts.mean(axis=0), rtol=1e-5)
        assert result.labels.tolist() == [0] * 100

    def test_two_blobs_recovered(self):
        rng = np.random.default_rng(6)
        a = rng.normal(0.0, 0.1, size=(200, 2))
        b = rng.normal(5.0, 0.1, size=(200, 2))
        pts = np.vstack([a, b]).astype(np.float32)
        result = kmeans(pts, 2, seed=1)
        centers = sorted(result.centroids[:, 0].tolist())
        assert centers[0] == pytest.approx(0.0, abs=0.05)
        assert centers[1] == pytest.approx(5.0, abs=0.05)

    def test_matches_lloyd_reference_from_same_start(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(300, 4)).astype(np.float32)
        init = pts[:5].copy()
        ours = kmeans(pts, 5, seed=0, init_centroids=init)
        ref_centroids, ref_labels = lloyd_reference(pts, init)
        np.testing.assert_allclose(ours.centroids, ref_centroids, rtol=1e-4, atol=1e-5)
        assert np.array_equal(ours.labels, ref_labels)

    def test_distortion_history_non_increasing(self):
        rng = np.random.default_rng(8)
        pts = rng.normal(size=(500, 8)).astype(np.float32)
        result = kmeans(pts, 16, seed=2)
        history = np.asarray(result.history)
        assert len(history) >= 1
        assert np.all(np.diff(history) <= 1e-9)
        assert result.distortion == pytest.approx(history[-1])

    def test_deterministic_for_fixed_seed(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(size=(400, 4)).astype(np.float32)
        r1 = kmeans(pts, 8, seed=7)
        r2 = kmeans(pts, 8, seed=7)
        np.testing.assert_array_equal(r1.centroids, r2.centroids)
        np.testing.assert_array_equal(r1.labels, r2.labels)

    def test_different_seeds_may_differ_but_stay_valid(self):
        rng = np.random.default_rng(10)
        pts = rng.normal(size=(200, 2)).astype(np.float32)
        for seed in range(3):
            result = kmeans(pts, 4, seed=seed)
            assert result.centroids.shape == (4, 2)
            assert set(result.labels.tolist()) <= set(range(4))

    def test_every_cluster_nonempty(self):
        # duplicate-heavy input tends to produce empty clusters without repair
        pts = np.repeat(np.eye(3, dtype=np.float32), 40, axis=0)
        pts = pts + np.random.default_rng(11).normal(0, 1e-4, pts.shape).astype(np.float32)
        result = kmeans(pts, 3, seed=0)
        assert len(np.unique(result.labels)) == 3

    def test_rejects_k_above_count(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2), dtype=np.float32), 4)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((0, 2), dtype=np.float32), 1)

    def test_partition_property(self):
        rng = np.random.default_rng(12)
        pts = rng.normal(size=(120, 3)).astype(np.float32)
        result = kmeans(pts, 6, seed=3)
        groups = result.partition
        assert sorted(itertools.chain.from_iterable(g.tolist() for g in groups)) == list(
            range(120)
        )


class TestSameSizeKMeans:
    def test_groups_are_balanced(self):
        rng = np.random.default_rng(13)
        pts = rng.normal(size=(64, 4)).astype(np.float32)
        result = kmeans_same_size(pts, 8, seed=0)
        counts = np.bincount(result.labels, minlength=8)
        assert counts.tolist() == [8] * 8

    def test_four_point_line_optimum(self):
        # points 0,1,10,11 on a line; the best balanced split into two pairs
        # is {0,1} and {10,11}. Check all three balanced bipartitions by hand.
        pts = np.array([[0.0], [1.0], [10.0], [11.0]], dtype=np.float32)

        def cost(groups):
            total = 0.0
            for g in groups:
                mean = pts[list(g)].mean()
                total += float(np.sum((pts[list(g)] - mean) ** 2))
            return total

        all_splits = [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))]
        best = min(all_splits, key=cost)
        assert best == ((0, 1), (2, 3))

        result = kmeans_same_size(pts, 2, seed=0)
        got = frozenset(
            frozenset(np.flatnonzero(result.labels == j).tolist()) for j in range(2)
        )
        assert got == frozenset({frozenset({0, 1}), frozenset({2, 3})})
        assert result.distortion == pytest.approx(cost(best))

    def test_beats_or_matches_greedy_on_blobs(self):
        rng = np.random.default_rng(14)
        centers = rng.uniform(-1, 1, size=(4, 3))
        pts = (centers[np.arange(32) % 4] + rng.normal(0, 0.05, (32, 3))).astype(np.float32)
        result = kmeans_same_size(pts, 4, seed=0)
        counts = np.bincount(result.labels, minlength=4)
        assert counts.tolist() == [8, 8, 8, 8]
        # grouping should put the 8 points of each blob together
        for j in range(4):
            members = np.flatnonzero(result.labels == j)
            assert len(set(members % 4)) == 1

    def test_rejects_indivisible_count(self):
        with pytest.raises(ValueError, match="divisible"):
            kmeans_same_size(np.zeros((5, 2), dtype=np.float32), 2)

    def test_group_size_one_is_identity(self):
        rng = np.random.default_rng(15)
        pts = rng.normal(size=(6, 2)).astype(np.float32)
        result = kmeans_same_size(pts, 6, seed=0)
        assert sorted(result.labels.tolist()) == list(range(6))
        for j in range(6):
            np.testing.assert_allclose(result.centroids[j], pts[result.labels.tolist().index(j)])

    def test_deterministic(self):
        rng = np.random.default_rng(16)
        pts = rng.normal(size=(40, 3)).astype(np.float32)
        r1 = kmeans_same_size(pts, 4, seed=5)
        r2 = kmeans_same_size(pts, 4, seed=5)
        np.testing.assert_array_equal(r1.labels, r2.labels)

    def test_swap_refinement_improves_over_plain_capacity_fill(self):
        # adversarial order: two tight pairs far apart plus two middle points;
        # a pure greedy fill can strand a middle point, swaps must fix or match
        pts = np.array(
            [[0.0], [0.2], [5.0], [5.2], [2.4], [2.6]], dtype=np.float32
        )
        result = kmeans_same_size(pts, 3, seed=0)
        groups = frozenset(
            frozenset(np.flatnonzero(result.labels == j).tolist()) for j in range(3)
        )
        assert groups == frozenset(
            {frozenset({0, 1}), frozenset({2, 3}), frozenset({4, 5})}
        )
