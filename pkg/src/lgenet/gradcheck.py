"""Finite-difference checks for every differentiable block, in 64-bit."""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .blocks import (Attention, BlockSettings, HybridBlock, SegECC, attention_head,
                     channel_attention, kpconv2d, kpconv3d, make_context, spatial_attention)
from .config import NetworkConfig
from .kernels import init_kernel_points
from .presegment import build_edges
from .spatial import assemble_input_features, build_pyramid, radius_search, stack_pyramids

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _cloud(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(n, 3))


@functools.lru_cache(maxsize=None)
def _layout(k: int, dims: int) -> np.ndarray:
    return init_kernel_points(k, dims, seed=0).points


def _param(rng, shape, scale=1.0):
    return ad.Parameter(rng.normal(0.0, scale, size=shape))


def _kpconv_case(rng, dims):
    pts = _cloud(rng, 30)
    radius = 0.9
    nb = radius_search(pts, pts, radius, max_neighbors=12, seed=int(rng.integers(1000)))
    k = 15 if dims == 3 else 17
    layout = _layout(k, dims)
    x = _param(rng, (30, 5))
    w = _param(rng, (k, 5, 4), 0.3)
    conv = kpconv3d if dims == 3 else kpconv2d
    fn = lambda: conv(pts, pts, nb, x, layout * radius, 0.6 * radius, w)  # noqa: E731
    return fn, [x, w]


def check_kpconv3d(seed: int) -> float:
    fn, inputs = _kpconv_case(np.random.default_rng(seed), 3)
    return ad.finite_difference_check(fn, inputs, tolerance=None, seed=seed)


def check_kpconv2d(seed: int) -> float:
    fn, inputs = _kpconv_case(np.random.default_rng(seed), 2)
    return ad.finite_difference_check(fn, inputs, tolerance=None, seed=seed)


def check_hybrid_block(seed: int) -> float:
    rng = np.random.default_rng(seed)
    fine = _cloud(rng, 40)
    coarse = fine[::2]
    radius = 0.9
    nb = radius_search(coarse, fine, radius, max_neighbors=12, seed=seed)
    nearest = radius_search(coarse, fine, 1e-9, max_neighbors=1)[:, 0]
    ctx = make_context(coarse, fine, nb, _layout(15, 3), _layout(17, 2), radius, 0.6 * radius,
                       shortcut_index=nearest)
    block = HybridBlock(6, 8, 15, 17, rng, BlockSettings(), strided=True)
    x = _param(rng, (40, 6))
    inputs = [x] + [p for p in block.parameters()]
    return ad.finite_difference_check(lambda: block(x, ctx), inputs, tolerance=None, seed=seed,
                                      max_coords=40)


def check_segecc(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n, c = 36, 6
    labels = rng.integers(0, 7, size=n)
    graph = build_edges(labels, max_edges=4, seed=seed)
    params = SegECC(c, rng, width=4, hidden=6)
    # move theta2 off its small init so the filters depend strongly on edges
    params.theta2.data = rng.normal(0.0, 0.5, size=params.theta2.shape)
    x = _param(rng, (n, c))
    fn = lambda: params(x, graph.segment_of_point, graph.edges, graph.num_segments)  # noqa: E731
    return ad.finite_difference_check(fn, [x] + params.parameters(), tolerance=None, seed=seed,
                                      max_coords=40)


def _attention_case(rng):
    params = Attention(6, 3, rng)
    params.alpha.data[:] = rng.normal()
    params.beta.data[:] = rng.normal()
    for p in (params.fc_u, params.fc_v, params.fc_t):
        p.data *= 0.4
    x = _param(rng, (20, 6), 0.5)
    return params, x


def check_spatial_attention(seed: int) -> float:
    params, x = _attention_case(np.random.default_rng(seed))
    inputs = [x, params.fc_u, params.fc_v, params.fc_t, params.bias_u, params.bias_v,
              params.bias_t, params.alpha]
    return ad.finite_difference_check(lambda: spatial_attention(x, params), inputs,
                                      tolerance=None, seed=seed)


def check_channel_attention(seed: int) -> float:
    params, x = _attention_case(np.random.default_rng(seed))
    return ad.finite_difference_check(lambda: channel_attention(x, params), [x, params.beta],
                                      tolerance=None, seed=seed)


def check_attention_head(seed: int) -> float:
    params, x = _attention_case(np.random.default_rng(seed))
    return ad.finite_difference_check(lambda: attention_head(x, params),
                                      [x] + params.parameters(), tolerance=None, seed=seed,
                                      max_coords=40)


def check_weighted_cross_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    logits = _param(rng, (25, 4))
    labels = rng.integers(0, 4, size=25)
    labels[::7] = 255
    weights = ad.compute_class_weights(rng.integers(5, 50, size=4))
    errs = []
    for form in ("categorical", "binary"):
        fn = lambda: ad.weighted_cross_entropy(ad.softmax_rows(logits), labels, weights,  # noqa: E731
                                               form=form)
        errs.append(ad.finite_difference_check(fn, [logits], tolerance=None, seed=seed))
    return max(errs)


def tiny_config(**overrides) -> NetworkConfig:
    """A three-level network small enough for exhaustive checks."""
    base = dict(schedule=[[0.3, 0.75], [0.6, 1.5], [1.2, 3.0]], widths=[8, 12, 16],
                segecc_layers=[2, 3], segecc_width=4, segecc_hidden=6, attention_cap=4096,
                max_edges=5, sphere_radius=2.0, precision="float64")
    base.update(overrides)
    return NetworkConfig(**base)


def tiny_batch(rng: np.random.Generator, n: int, config: NetworkConfig, spheres: int = 1):
    pyramids, feats, labels, index = [], [], [], []
    for s in range(spheres):
        pts = rng.normal(0.0, 1.0, size=(n, 3))
        pts /= np.maximum(1.0, np.linalg.norm(pts, axis=1, keepdims=True) / config.sphere_radius)
        segments = rng.integers(0, 6, size=n)
        pyramids.append(build_pyramid(pts, config.schedule, config.max_neighbors,
                                      seed=int(rng.integers(1000)), segments=segments))
        feats.append(assemble_input_features(pts, rng.uniform(0, 1, size=n)))
        labels.append(rng.integers(0, 3, size=n))
        index.append(np.arange(n) + s * n)
    return stack_pyramids(pyramids, feats, labels, index)


def check_network(seed: int) -> float:
    from .network import LGENet

    rng = np.random.default_rng(seed)
    config = tiny_config(seed=seed)
    model = LGENet(config, 3)
    attn = model.attention
    attn.alpha.data[:] = 0.5
    attn.beta.data[:] = 0.5
    batch = tiny_batch(rng, 50, config)
    weights = ad.compute_class_weights(np.bincount(batch.labels, minlength=3) + 1)

    def fn():
        return ad.weighted_cross_entropy(ad.softmax_rows(model(batch, seed=seed)), batch.labels,
                                         weights)

    return ad.finite_difference_check(fn, model.parameters(), tolerance=None, seed=seed,
                                      max_coords=6)


CHECKS: dict[str, Callable[[int], float]] = {
    "kpconv3d": check_kpconv3d,
    "kpconv2d": check_kpconv2d,
    "hybrid_block": check_hybrid_block,
    "segecc": check_segecc,
    "spatial_attention": check_spatial_attention,
    "channel_attention": check_channel_attention,
    "attention_head": check_attention_head,
    "weighted_cross_entropy": check_weighted_cross_entropy,
    "network": check_network,
}


def run_checks(names=None, seeds=(0, 1, 2)) -> list[CheckResult]:
    results = []
    with ad.precision(np.float64):
        for name in names or CHECKS:
            if name not in CHECKS:
                raise KeyError(f"unknown gradient check {name!r}; choose from {sorted(CHECKS)}")
            for seed in seeds:
                results.append(CheckResult(name, seed, CHECKS[name](seed)))
    return results
