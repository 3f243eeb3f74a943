"""Hierarchical k-means partitioning of document embeddings.

Nodes are split recursively (largest eligible node first) until the leaf
count reaches target_clusters or every node is at most ceil(n/target) docs.
Everything is driven by one seeded generator, so a fixed (embeddings,
target, branching, seed) tuple always yields the same partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import DomainError, ShapeError

_MAX_ITERS = 25


def _as_matrix(embeddings: Mapping[str, Sequence[float]]) -> tuple[list[str], np.ndarray]:
    ids = list(embeddings)
    rows = []
    for doc_id in ids:
        vec = embeddings[doc_id]
        values = getattr(vec, "values", vec)
        rows.append(np.asarray(values, dtype=np.float64))
    dims = {row.shape for row in rows}
    if len(dims) != 1 or rows[0].ndim != 1:
        raise ShapeError(f"embeddings must share one 1-D shape, got {sorted(map(str, dims))}")
    matrix = np.stack(rows)
    if not np.all(np.isfinite(matrix)):
        raise DomainError("embeddings contain non-finite values")
    return ids, matrix


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Euclidean k-means with seeded k-means++ init; returns non-empty
    clusters as index arrays (ascending within each cluster)."""
    centers = _kmeans_pp_seed(points, k, rng)
    assign = np.full(len(points), -1)
    for _ in range(_MAX_ITERS):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if len(members):  # empty clusters keep their previous center
                centers[j] = members.mean(axis=0)
    return [np.flatnonzero(assign == j) for j in range(k) if np.any(assign == j)]


@dataclass
class _Node:
    indices: np.ndarray
    frozen: bool = field(default=False)


def cluster_documents(
    embeddings: Mapping[str, Sequence[float]],
    target_clusters: int,
    branching: int = 2,
    seed: int = 0,
) -> list[list[str]]:
    """Partition doc ids into at most target_clusters groups.

    Returns the partition as lists of doc ids (each list non-empty, every id
    appearing exactly once). With fewer docs than target_clusters each doc
    becomes a singleton.
    """
    if target_clusters < 1:
        raise DomainError(f"target_clusters must be >= 1, got {target_clusters}")
    if branching < 2:
        raise DomainError(f"branching must be >= 2, got {branching}")
    if not embeddings:
        raise DomainError("embeddings must be non-empty")
    ids, points = _as_matrix(embeddings)
    n = len(ids)
    if n <= target_clusters:
        return [[doc_id] for doc_id in ids]

    max_leaf = math.ceil(n / target_clusters)
    rng = np.random.default_rng(seed)
    nodes: list[_Node] = [_Node(np.arange(n))]
    while len(nodes) < target_clusters:
        splittable = [i for i, node in enumerate(nodes) if len(node.indices) > max_leaf and not node.frozen]
        if not splittable:
            break
        pick = max(splittable, key=lambda i: (len(nodes[i].indices), -i))
        node = nodes[pick]
        k = min(branching, len(node.indices), target_clusters - len(nodes) + 1)
        if k < 2:
            break
        children = _kmeans(points[node.indices], k, rng)
        if len(children) < 2:  # degenerate geometry; leave the node as a leaf
            node.frozen = True
            continue
        nodes[pick : pick + 1] = [_Node(node.indices[c]) for c in children]

    return [[ids[i] for i in node.indices] for node in nodes]
