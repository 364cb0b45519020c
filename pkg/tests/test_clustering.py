"""Similarity construction, k-means partitioning, and PS election."""

import itertools

import numpy as np
import pytest

from satfedsim.clustering import (ClusterAssignment, assign_clusters,
                                  geo_similarity, gradient_similarity,
                                  joint_features, kmeans_cluster, select_ps)
from satfedsim.domain import SeededRng


class TestGradientSimilarity:
    def test_identical_opposite_orthogonal(self):
        updates = [np.array([1.0, 0.0]), np.array([1.0, 0.0]),
                   np.array([-1.0, 0.0]), np.array([0.0, 1.0])]
        h = gradient_similarity(updates)
        assert h[0, 1] == pytest.approx(1.0)
        assert h[0, 2] == pytest.approx(0.0)
        assert h[0, 3] == pytest.approx(0.5)

    def test_zero_norm_update_names_client(self):
        with pytest.raises(ValueError, match="client 1"):
            gradient_similarity([np.array([1.0, 0.0]), np.zeros(2)])

    def test_scale_invariance_exact(self):
        rng = np.random.default_rng(0)
        updates = [rng.standard_normal(16) for _ in range(5)]
        h1 = gradient_similarity(updates)
        h2 = gradient_similarity([4.0 * u for u in updates])
        np.testing.assert_array_equal(h1, h2)

    def test_symmetric_unit_diagonal(self):
        rng = np.random.default_rng(1)
        h = gradient_similarity([rng.standard_normal(8) for _ in range(6)])
        np.testing.assert_allclose(h, h.T, atol=1e-15)
        np.testing.assert_allclose(np.diag(h), 1.0)
        assert np.all((h >= 0.0) & (h <= 1.0))


class TestGeoSimilarity:
    def test_extremes_and_midpoint(self):
        # distances between x = 0, 1, 3: {1, 2, 3}
        pos = [np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]),
               np.array([3.0, 0.0, 0.0])]
        h = geo_similarity(pos)
        assert h[0, 1] == pytest.approx(1.0)   # closest pair
        assert h[0, 2] == pytest.approx(0.0)   # farthest pair
        assert h[1, 2] == pytest.approx(0.5)   # halfway across the range

    def test_degenerate_positions_all_ones(self):
        pos = [np.zeros(3)] * 4
        np.testing.assert_array_equal(geo_similarity(pos), np.ones((4, 4)))

    def test_symmetric_unit_diagonal(self):
        rng = np.random.default_rng(2)
        h = geo_similarity([rng.standard_normal(3) for _ in range(7)])
        np.testing.assert_allclose(h, h.T, atol=1e-15)
        np.testing.assert_allclose(np.diag(h), 1.0)


class TestJointFeatures:
    def _mats(self, n=5, seed=3):
        rng = np.random.default_rng(seed)
        a = rng.random((n, n))
        return (a + a.T) / 2, np.ones((n, n)) * 0.5

    def test_theta_zero_kills_gradient_half(self):
        h_cos, h_geo = self._mats()
        z = joint_features(h_cos, h_geo, 0.0)
        np.testing.assert_array_equal(z[:, :5], 0.0)
        np.testing.assert_array_equal(z[:, 5:], h_geo)

    def test_theta_one_kills_geo_half(self):
        h_cos, h_geo = self._mats()
        z = joint_features(h_cos, h_geo, 1.0)
        np.testing.assert_array_equal(z[:, :5], h_cos)
        np.testing.assert_array_equal(z[:, 5:], 0.0)

    def test_reference_weighting(self):
        # the stock 0.4/0.6 split
        h_cos, h_geo = self._mats()
        z = joint_features(h_cos, h_geo, 0.4)
        np.testing.assert_allclose(z[:, :5], 0.4 * h_cos)
        np.testing.assert_allclose(z[:, 5:], 0.6 * h_geo)

    def test_conformance_check(self):
        with pytest.raises(ValueError):
            joint_features(np.ones((3, 3)), np.ones((4, 4)), 0.5)


def brute_force_two_partition(points: np.ndarray) -> np.ndarray:
    """Optimal 2-partition by exhaustive enumeration (<= 12 points)."""
    n = len(points)
    best_cost, best_labels = np.inf, None
    for bits in range(1, 2 ** (n - 1)):  # fix point 0 in cluster 0
        labels = np.array([(bits >> i) & 1 for i in range(n)])
        cost = 0.0
        for c in (0, 1):
            members = points[labels == c]
            if len(members) == 0:
                cost = np.inf
                break
            cost += float(((members - members.mean(axis=0)) ** 2).sum())
        if cost < best_cost:
            best_cost, best_labels = cost, labels
    return best_labels


class TestKmeans:
    def test_identical_features_single_cluster(self):
        feats = np.ones((6, 4))
        out = kmeans_cluster(feats, 1, SeededRng(0, 3))
        np.testing.assert_array_equal(out.labels, 0)

    def test_two_blobs_match_enumeration_oracle(self):
        rng = np.random.default_rng(7)
        blob_a = rng.normal(0.0, 0.05, size=(6, 3))
        blob_b = rng.normal(5.0, 0.05, size=(6, 3))
        points = np.vstack([blob_a, blob_b])
        oracle = brute_force_two_partition(points)
        out = kmeans_cluster(points, 2, SeededRng(1, 3))
        # compare up to label swap
        agree = np.mean(out.labels == oracle)
        assert agree in (0.0, 1.0)

    def test_equal_points_share_a_label(self):
        feats = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [6.0, 6.0]])
        out = kmeans_cluster(feats, 2, SeededRng(2, 3))
        assert out.labels[0] == out.labels[1]

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(9)
        feats = rng.standard_normal((20, 6))
        a = kmeans_cluster(feats, 4, SeededRng(5, 3))
        b = kmeans_cluster(feats, 4, SeededRng(5, 3))
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_no_empty_clusters(self):
        rng = np.random.default_rng(11)
        for trial in range(10):
            feats = rng.standard_normal((9, 2))
            out = kmeans_cluster(feats, 4, SeededRng(trial, 3))
            assert len(np.unique(out.labels)) == 4

    def test_k_bounds(self):
        with pytest.raises(ValueError):
            kmeans_cluster(np.ones((3, 2)), 0, SeededRng(0, 3))
        with pytest.raises(ValueError):
            kmeans_cluster(np.ones((3, 2)), 4, SeededRng(0, 3))


class TestSelectPs:
    def test_single_member(self):
        assert select_ps([4], {4: np.zeros(3)}, {4: 1.0}) == 4

    def test_collinear_tie_breaks_on_load(self):
        positions = {0: np.array([-1.0, 0.0, 0.0]),
                     1: np.array([0.0, 0.0, 0.0]),
                     2: np.array([1.0, 0.0, 0.0])}
        # members 0 and 2 are equidistant from the mean (= member 1's spot);
        # member 1 sits on it, so drop it to force the tie
        loads = {0: 5.0, 2: 2.0}
        assert select_ps([0, 2], positions, loads) == 2

    def test_id_breaks_full_tie(self):
        positions = {3: np.array([1.0, 0.0, 0.0]), 8: np.array([-1.0, 0.0, 0.0])}
        loads = {3: 1.0, 8: 1.0}
        assert select_ps([8, 3], positions, loads) == 3

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(13)
        members = [2, 5, 7, 11, 12]
        positions = {i: rng.standard_normal(3) for i in members}
        loads = {i: float(rng.random()) for i in members}
        center = np.mean([positions[i] for i in members], axis=0)
        oracle = min(members, key=lambda i: (float(np.linalg.norm(positions[i] - center)),
                                             loads[i], i))
        assert select_ps(members, positions, loads) == oracle

    def test_translation_invariance(self):
        rng = np.random.default_rng(15)
        members = list(range(6))
        positions = {i: rng.standard_normal(3) for i in members}
        loads = {i: float(rng.random()) for i in members}
        shift = np.array([1e4, -2e3, 7.0])
        shifted = {i: positions[i] + shift for i in members}
        assert select_ps(members, positions, loads) == select_ps(members, shifted, loads)

    def test_empty_cluster_rejected(self):
        with pytest.raises(ValueError):
            select_ps([], {}, {})


def test_assign_clusters_end_to_end():
    rng = np.random.default_rng(21)
    n, k = 12, 3
    updates = [rng.standard_normal(10) for _ in range(n)]
    positions = {i: rng.standard_normal(3) * 1e5 for i in range(n)}
    loads = {i: float(rng.random()) for i in range(n)}
    out = assign_clusters(updates, positions, loads, k, 0.4, SeededRng(3, 3))
    assert isinstance(out, ClusterAssignment)
    assert out.labels.shape == (n,)
    assert len(np.unique(out.labels)) == k
    for j in range(k):
        ps = int(out.ps_ids[j])
        assert out.labels[ps] == j  # the PS belongs to its own cluster
