import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lgenet import autodiff as ad
from lgenet.autodiff import Tensor
from lgenet.blocks import (Attention, HybridBlock, SegECC, attention_head, channel_attention,
                           kpconv2d, kpconv3d, make_context, segecc, spatial_attention)
from lgenet.kernels import init_kernel_points
from lgenet.spatial import radius_search

GRID = 0.5
RADIUS = 2.5 * GRID
SIGMA = 1.5 * GRID


@pytest.fixture(autouse=True)
def float64():
    with ad.precision(np.float64):
        yield


@pytest.fixture(scope="module")
def layouts():
    return init_kernel_points(15, 3).points, init_kernel_points(17, 2).points


def cloud(seed, n=40, extent=2.0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, extent, size=(n, 3))
    nbrs = radius_search(pts, pts, RADIUS, max_neighbors=12, seed=seed)
    return rng, pts, nbrs


# -- naive dense-loop oracles ------------------------------------------------

def naive_kpconv(centers, support, neighbors, feats, kp, sigma, weights, dims):
    out = np.zeros((len(centers), weights.shape[2]))
    for m in range(len(centers)):
        for j in neighbors[m]:
            if j == len(support):
                continue
            y = support[j] - centers[m]
            for k in range(len(kp)):
                d = math.sqrt(sum((y[a] - kp[k, a]) ** 2 for a in range(dims)))
                h = max(0.0, 1.0 - d / sigma)
                out[m] += h * (feats[j] @ weights[k])
    return out


def naive_segecc(feats, seg, edges, S, p):
    leaky = lambda z: np.where(z > 0, z, p.slope * z)  # noqa: E731
    red = feats @ p.reduce.data
    means = np.zeros((S, p.width))
    for s in range(S):
        rows = red[seg == s]
        if len(rows):
            means[s] = rows.mean(axis=0)
    acc = np.zeros((S, p.width))
    cnt = np.zeros(S)
    for i, j in edges:
        e = means[i] - means[j]
        hid = leaky(e @ p.theta1.data + p.theta1_bias.data)
        theta = (hid @ p.theta2.data + p.theta2_bias.data).reshape(p.width, p.width)
        acc[i] += theta @ means[j]
        cnt[i] += 1
    upd = np.where(cnt[:, None] > 0, acc / np.maximum(cnt, 1)[:, None], 0.0)
    return upd[seg]


def naive_softmax(row):
    e = [math.exp(v - max(row)) for v in row]
    s = sum(e)
    return [v / s for v in e]


def naive_spatial(F, p):
    u = F @ p.fc_u.data + p.bias_u.data
    v = F @ p.fc_v.data + p.bias_v.data
    t = F @ p.fc_t.data + p.bias_t.data
    out = F.copy()
    for i in range(len(F)):
        w = naive_softmax([float(u[i] @ v[j]) for j in range(len(F))])
        for j in range(len(F)):
            out[i] += p.alpha.data[0] * w[j] * t[j]
    return out


def naive_channel(F, p):
    C = F.shape[1]
    out = F.copy()
    for i in range(C):
        w = naive_softmax([float(F[:, i] @ F[:, j]) for j in range(C)])
        for j in range(C):
            out[:, i] += p.beta.data[0] * w[j] * F[:, j]
    return out


def attention(seed, C=6, classes=3, alpha=0.7, beta=-0.4):
    rng = np.random.default_rng(seed)
    p = Attention(C, classes, rng)
    p.alpha.data[:] = alpha
    p.beta.data[:] = beta
    p.bias_u.data[:] = rng.normal(size=C)
    p.head_bias.data[:] = rng.normal(size=classes)
    return rng, p


# -- oracle equivalence ------------------------------------------------------

class TestOracles:
    @pytest.mark.parametrize("seed", range(3))
    def test_kpconv3d(self, seed, layouts):
        rng, pts, nbrs = cloud(seed)
        feats = rng.normal(size=(len(pts), 4))
        w = rng.normal(size=(15, 4, 5))
        kp = layouts[0] * RADIUS
        got = kpconv3d(pts, pts, nbrs, Tensor(feats), kp, SIGMA, Tensor(w)).data
        want = naive_kpconv(pts, pts, nbrs, feats, kp, SIGMA, w, 3)
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("seed", range(3))
    def test_kpconv2d(self, seed, layouts):
        rng, pts, nbrs = cloud(seed)
        feats = rng.normal(size=(len(pts), 4))
        w = rng.normal(size=(17, 4, 5))
        kp = layouts[1] * RADIUS
        got = kpconv2d(pts, pts, nbrs, Tensor(feats), kp, SIGMA, Tensor(w)).data
        want = naive_kpconv(pts, pts, nbrs, feats, kp, SIGMA, w, 2)
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("seed", range(3))
    def test_segecc(self, seed):
        rng = np.random.default_rng(seed)
        p = SegECC(5, rng, width=4, hidden=6)
        p.theta2.data[:] = rng.normal(size=p.theta2.shape)
        feats = rng.normal(size=(30, 5))
        seg = rng.integers(0, 6, 30)
        edges = np.array([(i, j) for i in range(6) for j in range(6) if i != j and (i + j) % 3])
        got = segecc(Tensor(feats), seg, edges, 6, p).data
        np.testing.assert_allclose(got, naive_segecc(feats, seg, edges, 6, p), atol=1e-12, rtol=0)

    @pytest.mark.parametrize("seed", range(3))
    def test_spatial_attention(self, seed):
        rng, p = attention(seed)
        F = rng.normal(size=(12, 6))
        got = spatial_attention(Tensor(F), p).data
        np.testing.assert_allclose(got, naive_spatial(F, p), atol=1e-12, rtol=0)

    @pytest.mark.parametrize("seed", range(3))
    def test_channel_attention(self, seed):
        rng, p = attention(seed)
        F = rng.normal(size=(12, 6))
        got = channel_attention(Tensor(F), p).data
        np.testing.assert_allclose(got, naive_channel(F, p), atol=1e-12, rtol=0)


# -- structural invariants ---------------------------------------------------

class TestInvariants:
    def test_zero_gains_are_identity(self):
        rng, p = attention(0, alpha=0.0, beta=0.0)
        F = rng.normal(size=(9, 6))
        assert np.array_equal(spatial_attention(Tensor(F), p).data, F)
        assert np.array_equal(channel_attention(Tensor(F), p).data, F)

    def test_head_at_zero_gains_is_twice_features(self):
        rng, p = attention(1, alpha=0.0, beta=0.0)
        F = rng.normal(size=(9, 6))
        want = (2 * F) @ p.head.data + p.head_bias.data
        np.testing.assert_allclose(attention_head(Tensor(F), p).data, want, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 20), st.integers(1, 8))
    def test_attention_rows_sum_to_one(self, seed, n, c):
        rng = np.random.default_rng(seed)
        F = rng.normal(size=(n, c))
        sa = ad.softmax_rows(Tensor(F @ F.T)).data
        ca = ad.softmax_rows(Tensor(F.T @ F)).data
        np.testing.assert_allclose(sa.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(ca.sum(axis=1), 1.0, atol=1e-9)

    def test_single_point_and_single_channel(self):
        rng, p = attention(2, C=1, classes=2)
        F = rng.normal(size=(1, 1))
        # one point: SA = [[1]]; one channel: CA = [[1]]
        want_sa = F + p.alpha.data[0] * (F @ p.fc_t.data + p.bias_t.data)
        np.testing.assert_allclose(spatial_attention(Tensor(F), p).data, want_sa, atol=1e-12)
        np.testing.assert_allclose(channel_attention(Tensor(F), p).data,
                                   F * (1 + p.beta.data[0]), atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_kpconv2d_ignores_vertical_translation(self, seed, layouts):
        rng, pts, nbrs = cloud(seed)
        feats = Tensor(rng.normal(size=(len(pts), 3)))
        w = Tensor(rng.normal(size=(17, 3, 4)))
        kp = layouts[1] * RADIUS
        shifted = pts.copy()
        shifted[:, 2] += rng.normal(size=len(pts)) * 0.3
        a = kpconv2d(pts, pts, nbrs, feats, kp, SIGMA, w).data
        b = kpconv2d(shifted, shifted, nbrs, feats, kp, SIGMA, w).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("conv, which", [(kpconv3d, 0), (kpconv2d, 1)])
    def test_neighbor_order_permutation(self, conv, which, layouts):
        rng, pts, nbrs = cloud(4)
        feats = Tensor(rng.normal(size=(len(pts), 3)))
        kp = layouts[which] * RADIUS
        w = Tensor(rng.normal(size=(len(kp), 3, 2)))
        perm = np.array([rng.permutation(row) for row in nbrs])
        a = conv(pts, pts, nbrs, feats, kp, SIGMA, w).data
        b = conv(pts, pts, perm, feats, kp, SIGMA, w).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_kpconv3d_rotation(self, layouts):
        rng, pts, nbrs = cloud(5)
        feats = Tensor(rng.normal(size=(len(pts), 3)))
        w = Tensor(rng.normal(size=(15, 3, 2)))
        kp = layouts[0] * RADIUS
        c, s = math.cos(0.7), math.sin(0.7)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        base = kpconv3d(pts, pts, nbrs, feats, kp, SIGMA, w).data
        rotated = kpconv3d(pts @ rot.T, pts @ rot.T, nbrs, feats, kp, SIGMA, w).data
        assert np.abs(rotated - base).max() > 1e-3
        co = kpconv3d(pts @ rot.T, pts @ rot.T, nbrs, feats, kp @ rot.T, SIGMA, w).data
        np.testing.assert_allclose(co, base, atol=1e-12)

    def test_constant_segment_means_give_uniform_context(self):
        rng = np.random.default_rng(0)
        p = SegECC(3, rng, width=4, hidden=5)
        feats = np.tile(rng.normal(size=(1, 3)), (20, 1))  # every difference is zero
        seg = np.repeat(np.arange(4), 5)
        edges = np.array([(i, j) for i in range(4) for j in range(4) if i != j])
        out = segecc(Tensor(feats), seg, edges, 4, p).data
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)

    def test_segment_uniform_output(self):
        rng = np.random.default_rng(1)
        p = SegECC(3, rng, width=4, hidden=5)
        seg = rng.integers(0, 5, 25)
        edges = np.array([(i, (i + 1) % 5) for i in range(5)])
        out = segecc(Tensor(rng.normal(size=(25, 3))), seg, edges, 5, p).data
        for s in range(5):
            rows = out[seg == s]
            np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))

    def test_single_segment_without_edges_is_zero(self):
        rng = np.random.default_rng(2)
        p = SegECC(3, rng, width=4)
        out = segecc(Tensor(rng.normal(size=(7, 3))), np.zeros(7, int), np.zeros((0, 2)), 1, p)
        assert out.shape == (7, 4) and not out.data.any()

    def test_segment_id_out_of_range(self):
        p = SegECC(3, np.random.default_rng(0), width=4)
        with pytest.raises(ValueError, match="out of range"):
            segecc(Tensor(np.ones((2, 3))), np.array([0, 3]), np.array([[0, 1]]), 2, p)


# -- hybrid block ------------------------------------------------------------

def block_context(layouts, pts, nbrs, **kw):
    return make_context(pts, pts, nbrs, layouts[0], layouts[1], RADIUS, SIGMA, **kw)


class TestHybridBlock:
    def test_shapes(self, layouts):
        rng, pts, nbrs = cloud(0)
        block = HybridBlock(5, 8, 15, 17, rng)
        out = block(Tensor(rng.normal(size=(len(pts), 5))), block_context(layouts, pts, nbrs))
        assert out.shape == (len(pts), 8)

    def test_strided_shapes(self, layouts):
        rng, pts, _ = cloud(1, n=60)
        coarse = pts[::3]
        nbrs = radius_search(coarse, pts, RADIUS, max_neighbors=10)
        shortcut = radius_search(coarse, pts, RADIUS, max_neighbors=1)[:, 0]
        ctx = make_context(coarse, pts, nbrs, layouts[0], layouts[1], RADIUS, SIGMA,
                           shortcut_index=shortcut)
        block = HybridBlock(4, 8, 15, 17, rng, strided=True)
        out = block(Tensor(rng.normal(size=(len(pts), 4))), ctx)
        assert out.shape == (len(coarse), 8)

    def test_zero_2d_merge_rows_match_3d_only(self, layouts):
        rng, pts, nbrs = cloud(2)
        x = Tensor(rng.normal(size=(len(pts), 8)))
        ctx = block_context(layouts, pts, nbrs)
        hybrid = HybridBlock(8, 8, 15, 17, np.random.default_rng(9))
        only3 = HybridBlock(8, 8, 15, 17, np.random.default_rng(9), mode="3d")
        c_mid = 2
        only3.reduce.weight.data[:] = hybrid.reduce.weight.data
        only3.w3.data[:] = hybrid.w3.data
        hybrid.merge.weight.data[c_mid:] = 0.0
        only3.merge.weight.data[:] = hybrid.merge.weight.data[:c_mid]
        np.testing.assert_allclose(hybrid(x, ctx).data, only3(x, ctx).data, atol=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            HybridBlock(4, 4, 15, 17, np.random.default_rng(0), mode="4d")

    def test_kpconv_weight_shape_checked(self, layouts):
        rng, pts, nbrs = cloud(0)
        with pytest.raises(ValueError, match="weight shape"):
            kpconv3d(pts, pts, nbrs, Tensor(np.ones((len(pts), 3))), layouts[0], SIGMA,
                     Tensor(np.ones((15, 4, 2))))
