"""Unsupervised piecewise-constant partition and segment graphs.

The partition minimizes

    sum_i |f_i - mean(segment(i))|^2 + reg * (number of cut adjacency edges)

greedily: every point starts as its own segment and the adjacent pair whose
merge lowers the objective most is merged until no merge helps. Merging
segments A and B changes the objective by ``|A||B|/(|A|+|B|) |mu_A - mu_B|^2
- reg * w_AB`` with ``w_AB`` the number of edges between them.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import PointCloud


def knn_graph(positions: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest neighbors (self excluded) and the symmetrized undirected edge list."""
    n = len(positions)
    kk = min(k + 1, n)
    _, idx = cKDTree(positions).query(positions, k=kk)
    idx = idx.reshape(n, kk)[:, 1:]
    src = np.repeat(np.arange(n), idx.shape[1])
    dst = idx.reshape(-1)
    pairs = np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return idx, np.unique(pairs, axis=0)


def geometric_features(positions: np.ndarray, intensity: np.ndarray, k: int = 10) -> np.ndarray:
    """Linearity, planarity, sphericity, verticality and intensity per point.

    Shape descriptors come from the eigenvalues of the covariance of each
    point's k-neighborhood (the point included); verticality is ``1 - |n_z|``
    for the neighborhood normal, so 0 on flat ground and 1 on walls.
    """
    n = len(positions)
    kk = min(k, n)
    _, idx = cKDTree(positions).query(positions, k=kk)
    nb = positions[idx.reshape(n, kk)]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / kk
    evals, evecs = np.linalg.eigh(cov)
    lam = np.sqrt(np.clip(evals[:, ::-1], 0.0, None))  # descending
    l1 = np.where(lam[:, 0] > 0, lam[:, 0], 1.0)
    linearity = (lam[:, 0] - lam[:, 1]) / l1
    planarity = (lam[:, 1] - lam[:, 2]) / l1
    sphericity = lam[:, 2] / l1
    flat = lam[:, 0] == 0
    linearity[flat] = planarity[flat] = sphericity[flat] = 0.0
    verticality = 1.0 - np.abs(evecs[:, 2, 0])
    return np.column_stack([linearity, planarity, sphericity, verticality,
                            np.asarray(intensity, dtype=np.float64)])


def partition_objective(features: np.ndarray, edges: np.ndarray, labels: np.ndarray,
                        reg: float) -> float:
    labels = np.asarray(labels)
    _, inv = np.unique(labels, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.zeros((inv.max() + 1, features.shape[1]))
    np.add.at(sums, inv, features)
    counts = np.bincount(inv)
    means = sums / counts[:, None]
    fidelity = float(((features - means[inv]) ** 2).sum())
    cut = int((labels[edges[:, 0]] != labels[edges[:, 1]]).sum()) if len(edges) else 0
    return fidelity + reg * cut


def partition_graph(features: np.ndarray, edges: np.ndarray, reg: float,
                    return_history: bool = False):
    """Greedy region merging on an undirected graph; returns dense labels.

    Ties between equal objective changes go to the lowest (a, b) segment
    pair. Labels are renumbered in order of each segment's first point.
    """
    if reg < 0:
        raise ValueError("reg_strength must be >= 0")
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    sums = features.copy()
    sizes = np.ones(n)
    adjacency: list[dict[int, int]] = [dict() for _ in range(n)]
    for a, b in np.asarray(edges, dtype=np.int64).reshape(-1, 2):
        a, b = int(a), int(b)
        if a == b:
            continue
        adjacency[a][b] = adjacency[a].get(b, 0) + 1
        adjacency[b][a] = adjacency[b].get(a, 0) + 1
    alive = np.ones(n, dtype=bool)
    parent = np.arange(n)

    def deltas(a: int, others: np.ndarray, weights: np.ndarray) -> np.ndarray:
        mu_a = sums[a] / sizes[a]
        mu_o = sums[others] / sizes[others, None]
        ward = sizes[a] * sizes[others] / (sizes[a] + sizes[others])
        return ward * ((mu_o - mu_a) ** 2).sum(axis=1) - reg * weights

    # Heap values are lower bounds of the current pair deltas. A popped entry
    # is merged only if its recomputed delta still equals the stored value;
    # otherwise it is re-queued, so the pair merged is always the true minimum.
    stored: dict[tuple[int, int], float] = {}
    heap: list[tuple[float, int, int]] = []
    for a in range(n):
        others = np.fromiter((b for b in adjacency[a] if b > a), dtype=np.int64)
        if others.size == 0:
            continue
        w = np.fromiter((adjacency[a][b] for b in others.tolist()), dtype=np.float64,
                        count=others.size)
        for b, d in zip(others.tolist(), deltas(a, others, w).tolist()):
            if d < 0:
                heap.append((d, a, b))
                stored[a, b] = d
    heapq.heapify(heap)
    history = []
    while heap:
        d, lo, hi = heapq.heappop(heap)
        if not (alive[lo] and alive[hi]) or hi not in adjacency[lo]:
            continue
        if stored.get((lo, hi)) != d:
            continue
        true = float(deltas(lo, np.array([hi]), np.array([float(adjacency[lo][hi])]))[0])
        if true != d and abs(true - d) > 1e-12 * max(1.0, abs(d)):
            stored[lo, hi] = true
            if true < 0:
                heapq.heappush(heap, (true, lo, hi))
            continue
        # survivor keeps the larger adjacency so fewer neighbors need relinking
        keep, gone = (lo, hi) if len(adjacency[lo]) >= len(adjacency[hi]) else (hi, lo)
        parent[gone] = keep
        alive[gone] = False
        sums[keep] += sums[gone]
        sizes[keep] += sizes[gone]
        nb_keep, nb_gone = adjacency[keep], adjacency[gone]
        nb_keep.pop(gone, None)
        nb_gone.pop(keep, None)
        for c, w in nb_gone.items():
            nb_keep[c] = nb_keep.get(c, 0) + w
            nc = adjacency[c]
            nc.pop(gone, None)
            nc[keep] = nc.get(keep, 0) + w
        adjacency[gone] = {}
        if return_history:
            history.append(d)
        if not nb_keep:
            continue
        others = np.fromiter(nb_keep.keys(), dtype=np.int64, count=len(nb_keep))
        w = np.fromiter(nb_keep.values(), dtype=np.float64, count=len(nb_keep))
        new = deltas(keep, others, w)
        for c, dc in zip(others[new < 0].tolist(), new[new < 0].tolist()):
            key = (keep, c) if keep < c else (c, keep)
            old = stored.get(key)
            if old is None or dc < old:
                stored[key] = dc
                heapq.heappush(heap, (dc, key[0], key[1]))
    roots = parent.copy()
    while True:
        nxt = roots[roots]
        if np.array_equal(nxt, roots):
            break
        roots = nxt
    _, first, dense = np.unique(roots, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    labels = order[dense.reshape(-1)]
    if return_history:
        return labels, history
    return labels


def partition(cloud: PointCloud, reg_strength: float = 0.03, k_adj: int = 10) -> np.ndarray:
    """Segment labels for ``cloud`` from geometric features and intensity.

    Intensity is expected already normalized to [0, 1].
    """
    if k_adj < 3:
        raise ValueError("k_adj must be at least 3")
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    features = geometric_features(cloud.positions, cloud.intensity, k_adj)
    _, edges = knn_graph(cloud.positions, k_adj)
    return partition_graph(features, edges, reg_strength)


@dataclass
class SegmentGraph:
    """Dense segment ids per point plus directed (receiver, sender) edges."""

    segment_of_point: np.ndarray
    num_segments: int
    edges: np.ndarray
    offsets: np.ndarray

    def out_degree(self) -> np.ndarray:
        return np.diff(self.offsets)


def build_edges(segment_labels: np.ndarray, max_edges: int = 80,
                seed: int | np.random.Generator = 0) -> SegmentGraph:
    """Connect every segment to every other one, subsampling to ``max_edges``.

    When a segment has more than ``max_edges`` candidates a uniform random
    subset of exactly ``max_edges`` senders is kept.
    """
    if max_edges < 1:
        raise ValueError("max_edges must be >= 1")
    labels = np.asarray(segment_labels)
    if labels.size == 0:
        raise ValueError("no segments to connect (S == 0)")
    _, dense = np.unique(labels, return_inverse=True)
    dense = dense.reshape(-1).astype(np.int64)
    s = int(dense.max()) + 1
    if s - 1 <= max_edges:
        recv = np.repeat(np.arange(s), s)
        send = np.tile(np.arange(s), s)
        keep = recv != send
        edges = np.stack([recv[keep], send[keep]], axis=1)
        degree = np.full(s, s - 1)
    else:
        rng = np.random.default_rng(seed)
        keys = rng.random((s, s))
        np.fill_diagonal(keys, np.inf)
        chosen = np.sort(np.argsort(keys, axis=1)[:, :max_edges], axis=1)
        edges = np.stack([np.repeat(np.arange(s), max_edges), chosen.reshape(-1)], axis=1)
        degree = np.full(s, max_edges)
    offsets = np.concatenate([[0], np.cumsum(degree)])
    return SegmentGraph(dense, s, edges.astype(np.int64), offsets)
