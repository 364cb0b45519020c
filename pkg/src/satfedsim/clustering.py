"""Client clustering from joint gradient/position features.

Each client is embedded as the concatenation of its row of the gradient
cosine-similarity matrix (weighted ``theta``) and its row of the
normalized inverse-distance matrix (weighted ``1 - theta``); Lloyd's
algorithm with greedy k-means++ seeding partitions those embeddings.  A
parameter-server satellite is elected per cluster: nearest to the cluster
centroid position, ties broken by lightest compute load, then lowest id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .domain import SeededRng

KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class SimilarityMatrices:
    """Pairwise client similarity in data space and in physical space, both in [0,1]."""

    h_cos: np.ndarray
    h_geo: np.ndarray


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray     # per-client cluster index in [0, K)
    ps_ids: np.ndarray     # elected parameter-server client per cluster
    centroids: np.ndarray  # K x 2C joint-feature centroids

    @property
    def num_clusters(self) -> int:
        return int(self.ps_ids.shape[0])

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def gradient_similarity(updates: Sequence[np.ndarray]) -> np.ndarray:
    """Normalized cosine similarity (1 + cos)/2 between client updates."""
    mat = np.asarray(updates, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm update vector for client {int(zero[0])}")
    unit = mat / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    h = (1.0 + cos) / 2.0
    np.fill_diagonal(h, 1.0)
    return h


def geo_similarity(positions: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise distances mapped linearly onto [0,1], nearest pair = 1.

    The min/max normalisation uses off-diagonal pairs only; the diagonal
    is pinned to 1.  If every position coincides the matrix degenerates to
    all ones.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    off = ~np.eye(n, dtype=bool)
    r_min, r_max = dist[off].min(), dist[off].max()
    if r_max == r_min:
        return np.ones((n, n))
    h = 1.0 - (dist - r_min) / (r_max - r_min)
    np.fill_diagonal(h, 1.0)
    return h


def joint_features(h_cos: np.ndarray, h_geo: np.ndarray, theta: float) -> np.ndarray:
    """Per-client embedding: [theta * similarity row || (1-theta) * proximity row]."""
    if h_cos.shape != h_geo.shape:
        raise ValueError("similarity matrices must be conformant")
    return np.concatenate([theta * h_cos, (1.0 - theta) * h_geo], axis=1)


def _kmeans_pp_seed(features: np.ndarray, k: int, rng: SeededRng) -> np.ndarray:
    """Greedy k-means++ seeding: each new centre drawn proportional to squared distance."""
    n = features.shape[0]
    centers = np.empty((k, features.shape[1]))
    first = int(rng.gen.integers(n))
    centers[0] = features[first]
    d2 = np.sum((features - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total == 0.0:
            idx = int(rng.gen.integers(n))
        else:
            idx = int(rng.gen.choice(n, p=d2 / total))
        centers[j] = features[idx]
        d2 = np.minimum(d2, np.sum((features - centers[j]) ** 2, axis=1))
    return centers


def kmeans_cluster(features: np.ndarray, k: int, rng: SeededRng) -> ClusterAssignment:
    """Lloyd's algorithm to convergence (or 100 iterations) on the joint features.

    Ties between equidistant centroids resolve to the lowest cluster
    index, and an emptied cluster is repaired by stealing the point
    farthest from its current centroid, so equal inputs always produce
    equal assignments.
    """
    n = features.shape[0]
    if k <= 0:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds number of clients {n}")
    centers = _kmeans_pp_seed(features, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = np.sum((features[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        # repair empty clusters with the globally worst-fitting point
        for j in range(k):
            if not np.any(new_labels == j):
                assigned = d2[np.arange(n), new_labels]
                counts = np.bincount(new_labels, minlength=k)
                donors = np.flatnonzero(counts[new_labels] > 1)
                steal = donors[np.argmax(assigned[donors])]
                new_labels[steal] = j
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centers[j] = features[labels == j].mean(axis=0)
    return ClusterAssignment(labels=labels, ps_ids=np.zeros(k, dtype=np.int64),
                             centroids=centers)


def select_ps(member_ids: Sequence[int],
              positions: Mapping[int, np.ndarray],
              comp_loads: Mapping[int, float]) -> int:
    """Elect the cluster's parameter server.

    Minimizes distance to the members' mean position; ties break to the
    lightest compute load, then the smallest id.
    """
    members = sorted(int(i) for i in member_ids)
    if not members:
        raise ValueError("cluster has no members")
    center = np.mean([positions[i] for i in members], axis=0)
    best = None
    for i in members:
        dist = float(np.linalg.norm(positions[i] - center))
        key = (dist, float(comp_loads[i]), i)
        if best is None or key < best:
            best = key
    return best[2]


def assign_clusters(updates: Sequence[np.ndarray],
                    positions: Mapping[int, np.ndarray],
                    comp_loads: Mapping[int, float],
                    k: int, theta: float, rng: SeededRng) -> ClusterAssignment:
    """Full pipeline: similarity matrices -> joint features -> k-means -> PS election."""
    n = len(updates)
    pos_list = [positions[i] for i in range(n)]
    h_cos = gradient_similarity(updates)
    h_geo = geo_similarity(pos_list)
    features = joint_features(h_cos, h_geo, theta)
    assignment = kmeans_cluster(features, k, rng)
    ps_ids = np.array([
        select_ps(assignment.members(j), positions, comp_loads)
        for j in range(k)
    ], dtype=np.int64)
    return ClusterAssignment(labels=assignment.labels, ps_ids=ps_ids,
                             centroids=assignment.centroids)
