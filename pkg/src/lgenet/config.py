"""Network, training and inference settings.

``full_config()`` is the full-scale five-level network; ``desk_config()`` is a
shrunken variant that trains on a single CPU in minutes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .spatial import DEFAULT_SCHEDULE


@dataclass
class NetworkConfig:
    # geometry
    schedule: list = field(default_factory=lambda: [list(p) for p in DEFAULT_SCHEDULE])
    radius_factor: float = 2.5
    sigma_factor: float = 1.5
    kernel_points_3d: int = 15
    kernel_points_2d: int = 17
    layout_seed: int = 0
    max_neighbors: list | None = None
    neighbor_quantile: float = 90.0
    # architecture
    widths: list = field(default_factory=lambda: [64, 128, 256, 512, 1024])
    in_features: int = 4
    conv_mode: str = "hybrid"
    segecc_layers: list = field(default_factory=lambda: [3, 4])
    segecc_width: int = 32
    segecc_hidden: int = 64
    max_edges: int = 80
    attention: bool = True
    attention_cap: int = 4096
    leaky_slope: float = 0.1
    bn_momentum: float = 0.98
    bn_eps: float = 1e-6
    norm_inference: str = "sphere"
    # presegmentation
    reg_strength: float = 0.03
    knn_adjacency: int = 10
    # training
    loss_form: str = "categorical"
    learning_rate: float = 0.001
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    momentum: float = 0.9
    epochs: int = 60
    iterations_per_epoch: int = 2000
    batch_spheres: int = 1
    sphere_radius: float = 24.0
    jitter_sigma: float = 0.04
    rotate: bool = True
    class_balanced_centers: bool = True
    center_bias: float = 1.0
    seed: int = 0
    precision: str = "float32"
    # inference
    min_votes: int = 20

    def __post_init__(self):
        self.validate()

    @property
    def num_layers(self) -> int:
        return len(self.schedule)

    def sigma(self, level: int) -> float:
        return self.sigma_factor * self.schedule[level][0]

    def validate(self) -> None:
        n = len(self.schedule)
        if n < 1:
            raise ValueError("schedule must have at least one level")
        grids = [g for g, _ in self.schedule]
        if any(b <= a for a, b in zip(grids, grids[1:])):
            raise ValueError(f"schedule grid sizes must be strictly increasing, got {grids}")
        if len(self.widths) != n:
            raise ValueError(f"widths has {len(self.widths)} entries but schedule has {n} levels")
        bad = [l for l in self.segecc_layers if not 1 <= l <= n]
        if bad:
            raise ValueError(f"segecc_layers {bad} outside encoder layers 1..{n}")
        if self.conv_mode not in ("hybrid", "3d", "2d"):
            raise ValueError(f"conv_mode must be hybrid, 3d or 2d, got {self.conv_mode!r}")
        if self.loss_form not in ("categorical", "binary"):
            raise ValueError(f"loss_form must be categorical or binary, got {self.loss_form!r}")
        if not 0.0 <= self.center_bias <= 1.0:
            raise ValueError("center_bias must lie in [0, 1]")
        if self.norm_inference not in ("sphere", "running"):
            raise ValueError("norm_inference must be sphere or running")
        if self.max_neighbors is not None and len(self.max_neighbors) != n:
            raise ValueError("max_neighbors needs one entry per schedule level")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.min_votes < 1 or self.max_edges < 1 or self.batch_spheres < 1:
            raise ValueError("min_votes, max_edges and batch_spheres must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def full_config() -> NetworkConfig:
    return NetworkConfig()


def desk_config() -> NetworkConfig:
    """Three levels, narrow widths and 12 m spheres, so it trains on one CPU core.

    Four spheres per step keep batch statistics close to the whole tile, so
    inference can use running averages and absolute height survives
    normalization.
    """
    return NetworkConfig(
        schedule=[[0.24, 0.6], [0.48, 1.2], [0.96, 2.4]],
        widths=[32, 64, 128],
        segecc_layers=[2, 3],
        segecc_width=16,
        segecc_hidden=32,
        attention_cap=2048,
        sphere_radius=12.0,
        epochs=30,
        iterations_per_epoch=50,
        batch_spheres=4,
        norm_inference="running",
        learning_rate=0.01,
        center_bias=0.5,
    )


PRESETS = {"full": full_config, "desk": desk_config}
