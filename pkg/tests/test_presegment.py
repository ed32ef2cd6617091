import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from lgenet.cloud_io import PointCloud
from lgenet.presegment import (build_edges, geometric_features, knn_graph, partition,
                               partition_graph, partition_objective)


def canonical(labels):
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    return np.argsort(np.argsort(first))[inv.reshape(-1)]


def chain(n):
    return np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)


def random_graph(rng, n, extra):
    edges = chain(n)
    more = rng.integers(0, n, size=(extra, 2))
    more = more[more[:, 0] != more[:, 1]]
    return np.unique(np.sort(np.vstack([edges, more]), axis=1), axis=0)


def naive_greedy(features, edges, reg):
    """Recompute every adjacent pair from scratch and merge the best, until none helps."""
    labels = np.arange(len(features))
    while True:
        best = None
        pairs = {}
        for a, b in edges:
            la, lb = labels[a], labels[b]
            if la != lb:
                key = (min(la, lb), max(la, lb))
                pairs[key] = pairs.get(key, 0) + 1
        for (la, lb), w in pairs.items():
            fa, fb = features[labels == la], features[labels == lb]
            na, nb = len(fa), len(fb)
            d = na * nb / (na + nb) * ((fa.mean(0) - fb.mean(0)) ** 2).sum() - reg * w
            if d < 0 and (best is None or d < best[0]):
                best = (d, la, lb)
        if best is None:
            return canonical(labels)
        labels[labels == best[2]] = best[1]


def set_partitions(n):
    """All set partitions of range(n) as restricted growth strings."""
    def grow(prefix, top):
        if len(prefix) == n:
            yield prefix
            return
        for v in range(top + 2):
            yield from grow(prefix + [v], max(top, v))
    yield from grow([0], 0)


class TestPartition:
    def test_zero_reg_gives_singletons(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(30, 3))
        labels = partition_graph(feats, random_graph(rng, 30, 40), 0.0)
        assert len(np.unique(labels)) == 30

    def test_huge_reg_gives_connected_components(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(20, 3))
        edges = np.vstack([chain(8), chain(12) + 8])
        labels = partition_graph(feats, edges, 1e12)
        np.testing.assert_array_equal(labels, [0] * 8 + [1] * 12)

    def test_two_patches_match_exhaustive_optimum(self):
        rng = np.random.default_rng(2)
        feats = np.concatenate([rng.normal(0, 0.05, (5, 2)), rng.normal(1, 0.05, (5, 2))])
        edges = random_graph(rng, 10, 6)
        reg = 0.05
        best = min((partition_objective(feats, edges, np.array(p), reg), p)
                   for p in set_partitions(10))
        labels = partition_graph(feats, edges, reg)
        assert partition_objective(feats, edges, labels, reg) == pytest.approx(best[0], abs=1e-12)
        np.testing.assert_array_equal(labels, canonical(np.array(best[1])))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.integers(2, 25), st.sampled_from([0.01, 0.1, 0.5, 2.0]))
    def test_lazy_heap_matches_naive_greedy(self, seed, n, reg):
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(n, 3))
        edges = random_graph(rng, n, n)
        np.testing.assert_array_equal(partition_graph(feats, edges, reg),
                                      naive_greedy(feats, edges, reg))

    def test_objective_decreases_every_merge(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(60, 3))
        edges = random_graph(rng, 60, 80)
        labels, history = partition_graph(feats, edges, 0.5, return_history=True)
        assert history and all(d < 0 for d in history)
        start = partition_objective(feats, edges, np.arange(60), 0.5)
        end = partition_objective(feats, edges, labels, 0.5)
        assert end == pytest.approx(start + sum(history), abs=1e-9)

    def test_segments_are_connected(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(0, 10, size=(400, 3))
        _, edges = knn_graph(pts, 6)
        labels = partition_graph(rng.normal(size=(400, 2)), edges, 1.0)
        for s in np.unique(labels):
            members = np.flatnonzero(labels == s)
            keep = np.isin(edges[:, 0], members) & np.isin(edges[:, 1], members)
            sub = edges[keep]
            remap = {m: i for i, m in enumerate(members)}
            rows = [remap[a] for a in sub[:, 0]]
            cols = [remap[b] for b in sub[:, 1]]
            graph = coo_matrix((np.ones(len(rows)), (rows, cols)),
                               shape=(len(members), len(members)))
            assert connected_components(graph, directed=False)[0] == 1

    def test_negative_reg(self):
        with pytest.raises(ValueError):
            partition_graph(np.zeros((2, 1)), chain(2), -1.0)

    def test_cloud_partition_and_k_adj(self):
        rng = np.random.default_rng(5)
        cloud = PointCloud.from_arrays(rng.uniform(0, 5, (200, 3)), intensity=rng.random(200))
        labels = partition(cloud)
        assert labels.shape == (200,) and labels.min() == 0
        np.testing.assert_array_equal(labels, partition(cloud))
        with pytest.raises(ValueError, match="k_adj"):
            partition(cloud, k_adj=2)

    def test_features_on_a_plane(self):
        rng = np.random.default_rng(6)
        pts = np.column_stack([rng.uniform(0, 5, (300, 2)), np.zeros(300)])
        f = geometric_features(pts, np.zeros(300))
        np.testing.assert_allclose(f[:, 2], 0.0, atol=1e-6)  # no spread off the plane
        np.testing.assert_allclose(f[:, 0] + f[:, 1], 1.0, atol=1e-6)
        np.testing.assert_allclose(f[:, 3], 0.0, atol=1e-9)  # horizontal


class TestBuildEdges:
    def test_small_graph_is_complete(self):
        g = build_edges(np.repeat(np.arange(10), 3), max_edges=80)
        assert g.num_segments == 10
        assert len(g.edges) == 90
        assert np.all(g.out_degree() == 9)

    def test_large_graph_is_subsampled(self):
        g = build_edges(np.arange(200), max_edges=80, seed=3)
        assert np.all(g.out_degree() == 80)
        assert len(g.edges) == 200 * 80
        assert np.all(g.edges[:, 0] != g.edges[:, 1])
        assert len(np.unique(g.edges, axis=0)) == len(g.edges)
        again = build_edges(np.arange(200), max_edges=80, seed=3)
        np.testing.assert_array_equal(g.edges, again.edges)

    def test_single_segment_has_no_edges(self):
        g = build_edges(np.zeros(5, int))
        assert g.num_segments == 1 and len(g.edges) == 0

    def test_labels_are_densified(self):
        g = build_edges(np.array([7, 7, 3, 12]))
        np.testing.assert_array_equal(g.segment_of_point, [1, 1, 0, 2])

    def test_errors(self):
        with pytest.raises(ValueError):
            build_edges(np.zeros(0, int))
        with pytest.raises(ValueError):
            build_edges(np.arange(3), max_edges=0)
