"""Network building blocks: kernel point convolutions, the hybrid 2D/3D
residual block, segment-graph edge-conditioned convolution and the
spatial/channel attention head.

Every block is a plain callable over :class:`~lgenet.autodiff.Tensor`
values; parameters live on lightweight :class:`Module` objects so they can be
enumerated, saved and updated by the optimizer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .kernels import correlation

SHADOW_FAR = 1e6


class Module:
    """Container that discovers Parameters and sub-modules by attribute."""

    training = True

    def children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key, value in vars(self).items():
            if key.startswith("running_") and isinstance(value, np.ndarray):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def astype(self, dtype) -> None:
        for p in self.parameters():
            p.astype(dtype)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / max(1, fan_in)), size=shape)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.98, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        # "running": stored averages at inference; "batch": statistics of the input itself
        self.inference_stats = "running"

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps,
                             batch_stats=self.training or self.inference_stats == "batch")


@dataclass(frozen=True)
class BlockSettings:
    slope: float = 0.1
    bn_momentum: float = 0.98
    bn_eps: float = 1e-6


class Unary(Module):
    """1x1 convolution (shared linear map) followed by batch norm and,
    optionally, a leaky rectifier."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 settings: BlockSettings = BlockSettings(), activation: bool = True):
        self.weight = Parameter(_he(rng, (c_in, c_out), c_in))
        self.norm = BatchNorm(c_out, settings.bn_momentum, settings.bn_eps)
        self.activation = activation
        self.slope = settings.slope

    def __call__(self, x: Tensor) -> Tensor:
        y = self.norm(ad.matmul(x, self.weight))
        return ad.leaky_relu(y, self.slope) if self.activation else y


# -- kernel point convolution ------------------------------------------------

def kernel_weights(centers: np.ndarray, support: np.ndarray, neighbors: np.ndarray,
                   kernel_points: np.ndarray, sigma: float, dims: int = 3) -> np.ndarray:
    """Correlation of every neighbor offset with every kernel point, (M, H, K).

    With ``dims=2`` offsets are projected onto the horizontal plane before the
    correlation, but the neighbor lists themselves are the 3-D ones.
    Shadow neighbors get zero weight.
    """
    shadow = len(support)
    padded = np.vstack([support, np.full((1, 3), SHADOW_FAR)])
    offsets = padded[neighbors] - centers[:, None, :]
    if dims == 2:
        offsets = offsets[..., :2]
    h = correlation(offsets, kernel_points[:, :dims], sigma)
    h[neighbors == shadow] = 0.0
    return h.astype(ad.default_dtype())


def kpconv_from_weights(h: np.ndarray, neighbors: np.ndarray, features: Tensor,
                        weights: Tensor) -> Tensor:
    """Apply kernel weights ``h`` (M, H, K) to gathered neighbor features.

    ``sum_h h[m, h, k] * x[neighbors[m, h]]`` is one sparse (M*K, N) product;
    zero correlations and shadow neighbors simply drop out of the matrix.
    """
    m, _, k = h.shape
    n, c_in = features.shape
    if weights.shape[:2] != (k, c_in):
        raise ValueError(f"weight shape {weights.shape} does not match K={k}, C_in={c_in}")
    nz = np.flatnonzero(h)
    mh, kk = np.divmod(nz, k)
    picker = sparse.csr_matrix((h.reshape(-1)[nz], (mh // h.shape[1] * k + kk,
                                                    neighbors.reshape(-1)[mh])),
                               shape=(m * k, n))
    per_kernel = ad.sparse_matmul(picker, features)                 # (M*K, C)
    flat = ad.reshape(per_kernel, (m, k * c_in))
    return ad.matmul(flat, ad.reshape(weights, (k * c_in, weights.shape[2])))


def kpconv3d(centers, support, neighbors, features: Tensor, kernel_points: np.ndarray,
             sigma: float, weights: Tensor) -> Tensor:
    """Rigid 3-D kernel point convolution; ``kernel_points`` already scaled."""
    h = kernel_weights(centers, support, neighbors, kernel_points, sigma, dims=3)
    return kpconv_from_weights(h, neighbors, features, weights)


def kpconv2d(centers, support, neighbors, features: Tensor, kernel_points: np.ndarray,
             sigma: float, weights: Tensor) -> Tensor:
    """Kernel point convolution on horizontal projections of the 3-D neighborhoods."""
    h = kernel_weights(centers, support, neighbors, kernel_points, sigma, dims=2)
    return kpconv_from_weights(h, neighbors, features, weights)


@dataclass
class LevelContext:
    """Geometry one block needs: neighbor lists and precomputed kernel weights.

    For strided blocks ``neighbors`` index the previous (finer) level and
    ``shortcut_index`` picks the finer point nearest to each output point.
    """

    neighbors: np.ndarray
    h3: np.ndarray | None
    h2: np.ndarray | None
    n_out: int
    shortcut_index: np.ndarray | None = None


def make_context(centers, support, neighbors, layout3d, layout2d, radius: float,
                 sigma: float, shortcut_index=None, dims=("3d", "2d")) -> LevelContext:
    h3 = (kernel_weights(centers, support, neighbors, layout3d * radius, sigma, 3)
          if "3d" in dims else None)
    h2 = (kernel_weights(centers, support, neighbors, layout2d * radius, sigma, 2)
          if "2d" in dims else None)
    return LevelContext(neighbors=neighbors, h3=h3, h2=h2, n_out=len(centers),
                        shortcut_index=shortcut_index)


class HybridBlock(Module):
    """Residual block with parallel 3-D and 2-D kernel point convolutions.

    reduce 1x1 -> [kpconv3d | kpconv2d] -> norm/act -> merge 1x1 -> add
    shortcut -> leaky rectifier. ``mode`` selects "hybrid", "3d" or "2d"
    branches for ablations.
    """

    def __init__(self, c_in: int, c_out: int, k3: int, k2: int, rng: np.random.Generator,
                 settings: BlockSettings = BlockSettings(), mode: str = "hybrid",
                 strided: bool = False):
        if mode not in ("hybrid", "3d", "2d"):
            raise ValueError(f"unknown block mode {mode!r}")
        self.mode = mode
        self.strided = strided
        self.c_in, self.c_out = c_in, c_out
        c_mid = max(1, c_out // 4)
        self.reduce = Unary(c_in, c_mid, rng, settings)
        branches = 0
        if mode in ("hybrid", "3d"):
            self.w3 = Parameter(_he(rng, (k3, c_mid, c_mid), k3 * c_mid))
            branches += 1
        if mode in ("hybrid", "2d"):
            self.w2 = Parameter(_he(rng, (k2, c_mid, c_mid), k2 * c_mid))
            branches += 1
        self.conv_norm = BatchNorm(branches * c_mid, settings.bn_momentum, settings.bn_eps)
        self.merge = Unary(branches * c_mid, c_out, rng, settings, activation=False)
        self.shortcut = (Unary(c_in, c_out, rng, settings, activation=False)
                         if c_in != c_out else None)
        self.slope = settings.slope

    def __call__(self, x: Tensor, ctx: LevelContext) -> Tensor:
        h = self.reduce(x)
        outs = []
        if self.mode in ("hybrid", "3d"):
            outs.append(kpconv_from_weights(ctx.h3, ctx.neighbors, h, self.w3))
        if self.mode in ("hybrid", "2d"):
            outs.append(kpconv_from_weights(ctx.h2, ctx.neighbors, h, self.w2))
        y = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
        y = ad.leaky_relu(self.conv_norm(y), self.slope)
        y = self.merge(y)
        shortcut = x
        if self.strided:
            shortcut = ad.gather(x, ctx.shortcut_index)
        if self.shortcut is not None:
            shortcut = self.shortcut(shortcut)
        return ad.leaky_relu(ad.add(y, shortcut), self.slope)


def hybrid_block(features: Tensor, level_context: LevelContext, block: HybridBlock) -> Tensor:
    return block(features, level_context)


# -- segment graph convolution -----------------------------------------------

class SegECC(Module):
    """Edge-conditioned convolution over segment-mean features.

    Point features are reduced to ``width`` channels and averaged per
    segment; for every directed edge (i <- j) a two-layer perceptron turns
    ``m_i - m_j`` into a width x width filter applied to ``m_j``; filtered
    messages are averaged per receiving segment and broadcast back to that
    segment's points. Segments without edges receive zeros.
    """

    def __init__(self, c_in: int, rng: np.random.Generator, width: int = 32, hidden: int = 64,
                 slope: float = 0.1):
        self.width = width
        self.reduce = Parameter(_he(rng, (c_in, width), c_in))
        self.theta1 = Parameter(_he(rng, (width, hidden), width))
        self.theta1_bias = Parameter(np.zeros(hidden))
        self.theta2 = Parameter(rng.normal(0.0, 0.1 / np.sqrt(hidden), size=(hidden, width * width)))
        self.theta2_bias = Parameter(np.eye(width).reshape(-1) / np.sqrt(width))
        self.slope = slope

    def __call__(self, x: Tensor, segment_ids: np.ndarray, edges: np.ndarray,
                 num_segments: int) -> Tensor:
        return segecc(x, segment_ids, edges, num_segments, self)


def segecc(features: Tensor, segment_ids: np.ndarray, edges: np.ndarray, num_segments: int,
           params: SegECC) -> Tensor:
    """Per-point global context of width ``params.width``.

    ``edges`` is an (E, 2) array of (receiver i, sender j) segment ids.
    """
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(segment_ids) != features.shape[0]:
        raise ValueError("segment_ids must cover every point")
    if segment_ids.min(initial=0) < 0 or segment_ids.max(initial=-1) >= num_segments:
        raise ValueError("segment id out of range")
    w = params.width
    if len(edges) == 0:
        return ad.gather(Tensor(np.zeros((num_segments, w)), dtype=features.dtype), segment_ids)
    reduced = ad.matmul(features, params.reduce)
    means = ad.scatter_mean(reduced, segment_ids, num_segments)
    recv, send = edges[:, 0], edges[:, 1]
    m_send = ad.gather(means, send)
    edge_feat = ad.sub(ad.gather(means, recv), m_send)
    hidden = ad.leaky_relu(ad.linear(edge_feat, params.theta1, params.theta1_bias), params.slope)
    filters = ad.reshape(ad.linear(hidden, params.theta2, params.theta2_bias), (len(edges), w, w))
    messages = ad.reshape(ad.matmul(filters, ad.reshape(m_send, (len(edges), w, 1))),
                          (len(edges), w))
    updated = ad.scatter_mean(messages, recv, num_segments)
    return ad.gather(updated, segment_ids)


# -- attention ---------------------------------------------------------------

class Attention(Module):
    """Spatial and channel attention followed by the classifier."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator):
        def fc():
            return Parameter(_he(rng, (channels, channels), channels))
        self.fc_u, self.fc_v, self.fc_t = fc(), fc(), fc()
        self.bias_u = Parameter(np.zeros(channels))
        self.bias_v = Parameter(np.zeros(channels))
        self.bias_t = Parameter(np.zeros(channels))
        self.alpha = Parameter(np.zeros(1))
        self.beta = Parameter(np.zeros(1))
        self.head = Parameter(_he(rng, (channels, num_classes), channels))
        self.head_bias = Parameter(np.zeros(num_classes))


def spatial_attention_delta(F: Tensor, params: Attention) -> Tensor:
    """``alpha * SA @ T``, the residual part of spatial attention."""
    u = ad.linear(F, params.fc_u, params.bias_u)
    v = ad.linear(F, params.fc_v, params.bias_v)
    t = ad.linear(F, params.fc_t, params.bias_t)
    sa = ad.softmax_rows(ad.matmul(u, ad.transpose(v)))
    return ad.mul(ad.matmul(sa, t), params.alpha)


def spatial_attention(F: Tensor, params: Attention) -> Tensor:
    """``F_sa = alpha * softmax_j(U_i . V_j) @ T + F`` over one sphere."""
    return ad.add(spatial_attention_delta(F, params), F)


def channel_attention(F: Tensor, params: Attention) -> Tensor:
    """``F_ca = beta * F @ CA^T + F`` with ``CA = softmax_j(F_:,i . F_:,j)``."""
    ca = ad.softmax_rows(ad.matmul(ad.transpose(F), F))
    return ad.add(ad.mul(ad.matmul(F, ad.transpose(ca)), params.beta), F)


def attention_head(F: Tensor, params: Attention) -> Tensor:
    """Class logits from the sum of spatially and channel-attended features."""
    fused = ad.add(spatial_attention(F, params), channel_attention(F, params))
    return ad.linear(fused, params.head, params.head_bias)
