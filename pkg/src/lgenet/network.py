"""LGENet assembly: hybrid encoder with SegECC, nearest-upsampling decoder
and the spatial-channel attention head."""
from __future__ import annotations

import functools

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .blocks import (Attention, BatchNorm, BlockSettings, HybridBlock, LevelContext, Module, SegECC,
                     Unary, _he, channel_attention, make_context, spatial_attention_delta)
from .config import NetworkConfig
from .kernels import init_kernel_points
from .presegment import build_edges
from .spatial import SphereBatch


@functools.lru_cache(maxsize=16)
def _cached_layout(K: int, dim: int, seed: int) -> np.ndarray:
    layout = init_kernel_points(K, dim, seed)
    points = layout.points.copy()
    points.flags.writeable = False
    return points


class LGENet(Module):
    """Encoder-decoder over a :class:`~lgenet.spatial.SphereBatch`.

    Encoder layer l runs a (strided, except at layer 1) hybrid block and a
    plain hybrid block; layers listed in ``segecc_layers`` concatenate the
    SegECC context after their second block. The decoder upsamples by
    nearest point, concatenates the skip features and applies a unary block.
    """

    def __init__(self, config: NetworkConfig, num_classes: int):
        self.config = config
        self.num_classes = num_classes
        rng = np.random.default_rng(config.seed)
        self.layout3d = _cached_layout(config.kernel_points_3d, 3, config.layout_seed)
        self.layout2d = _cached_layout(config.kernel_points_2d, 2, config.layout_seed)
        settings = BlockSettings(config.leaky_slope, config.bn_momentum, config.bn_eps)
        k3, k2 = config.kernel_points_3d, config.kernel_points_2d
        widths = list(config.widths)
        self.first_blocks: list[HybridBlock] = []
        self.second_blocks: list[HybridBlock] = []
        self.segecc_blocks: list[SegECC | None] = []
        skip_widths = []
        c = config.in_features
        for layer, w in enumerate(widths):
            self.first_blocks.append(HybridBlock(c, w, k3, k2, rng, settings, config.conv_mode,
                                                 strided=layer > 0))
            self.second_blocks.append(HybridBlock(w, w, k3, k2, rng, settings, config.conv_mode))
            if layer + 1 in config.segecc_layers:
                self.segecc_blocks.append(SegECC(w, rng, config.segecc_width,
                                                 config.segecc_hidden, config.leaky_slope))
                c = w + config.segecc_width
            else:
                self.segecc_blocks.append(None)
                c = w
            skip_widths.append(c)
        self.decoder: list[Unary] = []
        for layer in range(len(widths) - 1, 0, -1):
            self.decoder.append(Unary(c + skip_widths[layer - 1], widths[layer - 1], rng, settings))
            c = widths[layer - 1]
        self.head_channels = c
        if config.attention:
            self.attention = Attention(c, num_classes, rng)
        else:
            self.head = Parameter(_he(rng, (c, num_classes), c))
            self.head_bias = Parameter(np.zeros(num_classes))
        self.assign_names()
        stats = "batch" if config.norm_inference == "sphere" else "running"
        for module in self.modules():
            if isinstance(module, BatchNorm):
                module.inference_stats = stats

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    # -- forward -------------------------------------------------------------

    def contexts(self, batch: SphereBatch) -> list[tuple[LevelContext, LevelContext]]:
        """(strided, plain) geometry per encoder layer."""
        cfg = self.config
        dims = {"hybrid": ("3d", "2d"), "3d": ("3d",), "2d": ("2d",)}[cfg.conv_mode]
        out = []
        for l, level in enumerate(batch.levels):
            radius, sigma = cfg.schedule[l][1], cfg.sigma(l)
            plain = make_context(level.points, level.points, level.neighbors, self.layout3d,
                                 self.layout2d, radius, sigma, dims=dims)
            if l == 0:
                strided = plain
            else:
                prev = batch.levels[l - 1]
                strided = make_context(level.points, prev.points, level.pool_neighbors,
                                       self.layout3d, self.layout2d, radius, sigma,
                                       shortcut_index=level.pool_nearest, dims=dims)
            out.append((strided, plain))
        return out

    def segment_graph(self, batch: SphereBatch, level: int, rng: np.random.Generator):
        """Dense segment ids and per-sphere edges at ``level``."""
        segments = batch.levels[level].segments
        if segments is None or (segments < 0).any():
            raise ValueError(f"SegECC at layer {level + 1} needs segment ids for every point")
        ids = np.empty(len(segments), dtype=np.int64)
        edges = []
        base = 0
        for sl in batch.sphere_slices(level):
            graph = build_edges(segments[sl], self.config.max_edges, rng)
            ids[sl] = graph.segment_of_point + base
            edges.append(graph.edges + base)
            base += graph.num_segments
        return ids, np.concatenate(edges) if edges else np.zeros((0, 2), np.int64), base

    def __call__(self, batch: SphereBatch, seed: int = 0) -> Tensor:
        return self.forward(batch, seed)

    def forward(self, batch: SphereBatch, seed: int = 0) -> Tensor:
        rng = np.random.default_rng(seed)
        if len(batch.levels) != self.config.num_layers:
            raise ValueError(f"batch has {len(batch.levels)} levels, network expects "
                             f"{self.config.num_layers}")
        x = Tensor(batch.features)
        skips = []
        for l, (strided, plain) in enumerate(self.contexts(batch)):
            x = self.first_blocks[l](x, strided)
            x = self.second_blocks[l](x, plain)
            seg = self.segecc_blocks[l]
            if seg is not None:
                ids, edges, n_seg = self.segment_graph(batch, l, rng)
                x = ad.concat([x, seg(x, ids, edges, n_seg)], axis=1)
            skips.append(x)
        for step, unary in enumerate(self.decoder):
            l = len(skips) - 1 - step
            x = ad.gather(x, batch.levels[l].up_indices)
            x = unary(ad.concat([x, skips[l - 1]], axis=1))
        return self.classify(x, batch, rng)

    def classify(self, x: Tensor, batch: SphereBatch, rng: np.random.Generator) -> Tensor:
        if not self.config.attention:
            return ad.linear(x, self.head, self.head_bias)
        slices = batch.sphere_slices(0)
        outs = []
        for sl in slices:
            f = x if len(slices) == 1 else ad.take_rows(x, np.arange(sl.start, sl.stop))
            outs.append(self._attend(f, rng))
        return outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)

    def _attend(self, f: Tensor, rng: np.random.Generator) -> Tensor:
        params = self.attention
        n = f.shape[0]
        cap = self.config.attention_cap
        if n <= cap:
            delta = spatial_attention_delta(f, params)
        else:
            chosen = np.sort(rng.choice(n, size=cap, replace=False))
            sub_delta = spatial_attention_delta(ad.take_rows(f, chosen), params)
            scatter = np.full(n, cap, dtype=np.int64)
            scatter[chosen] = np.arange(cap)
            delta = ad.gather(sub_delta, scatter)
        f_sa = ad.add(f, delta)
        f_ca = channel_attention(f, params)
        return ad.linear(ad.add(f_sa, f_ca), params.head, params.head_bias)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param:{k}": p.data for k, p in self.named_parameters()}
        out.update({f"buffer:{k}": v for k, v in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self._buffer_owners())
        expected = {f"param:{k}" for k in params} | {f"buffer:{k}" for k in buffers}
        missing = expected - set(state)
        if missing:
            raise ValueError(f"checkpoint lacks {sorted(missing)[:5]}")
        for k, p in params.items():
            value = state[f"param:{k}"]
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {value.shape} vs {p.shape}")
            p.data = value.copy()
            p.grad = np.zeros_like(p.data)
            p.momentum_buffer = np.zeros_like(p.data)
        for k, (owner, attr) in buffers.items():
            getattr(owner, attr)[...] = state[f"buffer:{k}"]

    def _buffer_owners(self, module: Module | None = None, prefix: str = ""):
        module = module or self
        for key, value in vars(module).items():
            if key.startswith("running_") and isinstance(value, np.ndarray):
                yield prefix + key, (module, key)
        for key, child in module.children():
            yield from self._buffer_owners(child, f"{prefix}{key}.")
