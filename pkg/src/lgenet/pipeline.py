"""Preprocessing, training, checkpointing and vote-averaged inference."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .cloud_io import UNLABELED, DatasetManifest, PointCloud
from .config import NetworkConfig
from .metrics import ConfusionMatrix
from .network import LGENet
from .presegment import partition
from .spatial import (SphereBatch, assemble_input_features, augment, build_pyramid,
                      grid_subsample, neighbor_count_quantile, sample_sphere, stack_pyramids)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LGENETv1"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PreparedCloud:
    """A cloud subsampled at the first grid size, with segments and a k-d tree."""

    cloud: PointCloud
    tree: cKDTree = field(repr=False)

    @classmethod
    def from_cloud(cls, cloud: PointCloud) -> "PreparedCloud":
        return cls(cloud, cKDTree(cloud.positions))


def prepare_cloud(cloud: PointCloud, config: NetworkConfig) -> PreparedCloud:
    """Grid-subsample at the first level's grid and attach segment ids.

    Existing segment ids ride along by majority vote; otherwise the cloud is
    partitioned with the configured regularization strength.
    """
    sub, _ = grid_subsample(cloud, config.schedule[0][0])
    if not sub.has_segments:
        sub = sub.with_(segment=partition(sub, config.reg_strength, config.knn_adjacency))
    return PreparedCloud.from_cloud(sub)


def sphere_input(prepared: PreparedCloud, center, config: NetworkConfig,
                 rng: np.random.Generator, training: bool):
    """Pyramid, input features, labels and cloud indices for one sphere."""
    cloud = prepared.cloud
    idx = sample_sphere(cloud.positions, center, config.sphere_radius, prepared.tree)
    if idx.size == 0:
        idx = np.array([int(prepared.tree.query(center)[1])])
    pts = cloud.positions[idx]
    if training:
        pts = augment(pts, center, rng, config.jitter_sigma, None if config.rotate else 0.0)
    features = assemble_input_features(pts, cloud.intensity[idx])
    pyramid = build_pyramid(pts, config.schedule, config.max_neighbors,
                            seed=int(rng.integers(2**31)), segments=cloud.segment[idx])
    return pyramid, features, cloud.label[idx], idx


def make_batch(prepared: PreparedCloud, centers, config: NetworkConfig,
               rng: np.random.Generator, training: bool) -> SphereBatch:
    parts = [sphere_input(prepared, c, config, rng, training) for c in centers]
    return stack_pyramids([p[0] for p in parts], [p[1] for p in parts],
                          [p[2] for p in parts], [p[3] for p in parts])


def center_sampler(cloud: PointCloud, balanced: bool, num_classes: int, bias: float = 1.0):
    """Point-selection probabilities: uniform, or ``frequency ** -bias`` of the
    point's label (``bias=1`` gives every class the same share of centers)."""
    n = len(cloud)
    if not balanced or not cloud.has_labels:
        return np.full(n, 1.0 / n)
    labels = cloud.label.astype(np.int64)
    labeled = labels != UNLABELED
    freq = np.bincount(labels[labeled], minlength=num_classes).astype(np.float64)
    weight = np.zeros(n)
    weight[labeled] = freq[labels[labeled]] ** -bias
    return weight / weight.sum()


def calibrate_max_neighbors(prepared: list[PreparedCloud], config: NetworkConfig,
                            samples: int = 8, seed: int = 0) -> list[int]:
    """Per-level neighbor-count quantile over uncapped random spheres."""
    rng = np.random.default_rng(seed)
    uncapped = NetworkConfig.from_dict({**config.to_dict(), "max_neighbors": None})
    pyramids = []
    for i in range(samples):
        pc = prepared[i % len(prepared)]
        center = pc.cloud.positions[rng.integers(len(pc.cloud))]
        pyramids.append(sphere_input(pc, center, uncapped, rng, training=False)[0])
    return neighbor_count_quantile(pyramids, config.neighbor_quantile)


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    config: NetworkConfig
    class_names: list[str]
    state: dict[str, np.ndarray]
    layouts: dict[str, np.ndarray]
    epoch: int = 0
    class_weights: list[float] = field(default_factory=list)
    rng_state: dict | None = None
    history: list[float] = field(default_factory=list)

    @classmethod
    def from_model(cls, model: LGENet, class_names, epoch=0, class_weights=(), rng_state=None,
                   history=()) -> "Checkpoint":
        state = {k: np.array(v, copy=True) for k, v in model.state().items()}
        return cls(model.config, list(class_names), state,
                   {"kernel3d": np.array(model.layout3d), "kernel2d": np.array(model.layout2d)},
                   epoch, [float(w) for w in class_weights], rng_state,
                   [float(h) for h in history])

    def build_model(self) -> LGENet:
        dtype = np.dtype(self.config.precision)
        with ad.precision(dtype):
            model = LGENet(self.config, len(self.class_names))
        model.layout3d = self.layouts["kernel3d"]
        model.layout2d = self.layouts["kernel2d"]
        model.load_state(self.state)
        return model

    def save(self, path) -> None:
        arrays = {**{f"state/{k}": v for k, v in sorted(self.state.items())},
                  **{f"layout/{k}": v for k, v in sorted(self.layouts.items())}}
        table, blobs, offset = [], [], 0
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            table.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str,
                          "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
        header = {
            "config": self.config.to_dict(), "class_names": self.class_names,
            "epoch": self.epoch, "class_weights": self.class_weights,
            "rng_state": self.rng_state, "history": self.history, "arrays": table,
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(raw)))
            fh.write(raw)
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an LGENet checkpoint")
        version, hlen = struct.unpack_from("<IQ", raw, len(CHECKPOINT_MAGIC))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        start = len(CHECKPOINT_MAGIC) + 12
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        base = start + hlen
        state, layouts = {}, {}
        for entry in header["arrays"]:
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]),
                                count=int(np.prod(entry["shape"], dtype=np.int64)),
                                offset=base + entry["offset"]).reshape(entry["shape"]).copy()
            kind, name = entry["name"].split("/", 1)
            (state if kind == "state" else layouts)[name] = arr
        return cls(NetworkConfig.from_dict(header["config"]), header["class_names"], state,
                   layouts, header["epoch"], header["class_weights"], header["rng_state"],
                   header["history"])


# -- training ----------------------------------------------------------------

def training_step(model: LGENet, batch: SphereBatch, class_weights, lr: float,
                  seed: int) -> float:
    cfg = model.config
    params = model.parameters()
    ad.zero_grad(params)
    logits = model(batch, seed=seed)
    probs = ad.softmax_rows(logits)
    loss = ad.weighted_cross_entropy(probs, batch.labels, class_weights, form=cfg.loss_form)
    loss.backward()
    ad.sgd_step(params, lr, cfg.momentum)
    return float(loss.data)


def train(prepared: list[PreparedCloud], class_names: list[str], config: NetworkConfig,
          checkpoint_path=None, log: Callable[[str], None] | None = None,
          max_steps: int | None = None) -> Checkpoint:
    """Train from scratch on prepared (subsampled, segmented) clouds.

    Each step samples sphere centers (class-balanced if configured), augments,
    builds pyramids, runs forward/backward and a momentum SGD update. A
    checkpoint is written after every epoch when ``checkpoint_path`` is set.
    """
    log = log or logger.info
    num_classes = len(class_names)
    dtype = np.dtype(config.precision)
    if config.max_neighbors is None:
        config = NetworkConfig.from_dict(
            {**config.to_dict(), "max_neighbors": calibrate_max_neighbors(prepared, config,
                                                                          seed=config.seed)})
        log(f"max_neighbors per level: {config.max_neighbors}")
    counts = np.zeros(num_classes)
    for pc in prepared:
        lab = pc.cloud.label[pc.cloud.label != UNLABELED].astype(np.int64)
        counts += np.bincount(lab, minlength=num_classes)[:num_classes]
    class_weights = ad.compute_class_weights(counts)
    log("class weights: " + ", ".join(f"{n}={w:.4f}" for n, w in zip(class_names, class_weights)))
    with ad.precision(dtype):
        model = LGENet(config, num_classes)
        model.train()
        rng = np.random.default_rng(config.seed)
        samplers = [center_sampler(pc.cloud, config.class_balanced_centers, num_classes,
                                   config.center_bias)
                    for pc in prepared]
        history: list[float] = []
        step = 0
        checkpoint = None
        for epoch in range(config.epochs):
            lr = ad.learning_rate(epoch, config.learning_rate, config.lr_decay,
                                  config.lr_decay_every)
            start = time.perf_counter()
            epoch_losses = []
            for _ in range(config.iterations_per_epoch):
                pc_index = int(rng.integers(len(prepared)))
                pc = prepared[pc_index]
                picks = rng.choice(len(pc.cloud), size=config.batch_spheres, p=samplers[pc_index])
                batch = make_batch(pc, pc.cloud.positions[picks], config, rng, training=True)
                try:
                    loss = training_step(model, batch, class_weights, lr,
                                         int(rng.integers(2**31)))
                except ad.NonFiniteError as exc:
                    raise TrainingDiverged(f"training diverged at step {step}: {exc}") from exc
                epoch_losses.append(loss)
                history.append(loss)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            log(f"epoch {epoch + 1}/{config.epochs} lr={lr:.6g} "
                f"loss={np.mean(epoch_losses):.4f} time={time.perf_counter() - start:.1f}s")
            checkpoint = Checkpoint.from_model(model, class_names, epoch + 1, class_weights,
                                               rng.bit_generator.state, history)
            if checkpoint_path is not None:
                checkpoint.save(checkpoint_path)
            if max_steps is not None and step >= max_steps:
                break
    return checkpoint


# -- inference ---------------------------------------------------------------

@dataclass
class Prediction:
    probabilities: np.ndarray          # per raw point
    labels: np.ndarray                 # per raw point
    sub_probabilities: np.ndarray      # per subsampled point
    sub_labels: np.ndarray
    votes: np.ndarray                  # per subsampled point
    prepared: PreparedCloud
    spheres: int


def predict_with_voting(cloud: PointCloud, checkpoint: Checkpoint | LGENet,
                        min_votes: int | None = None, seed: int = 0,
                        prepared: PreparedCloud | None = None,
                        log: Callable[[str], None] | None = None) -> Prediction:
    """Average softmax outputs over random spheres until every subsampled
    point has at least ``min_votes`` evaluations, then transfer labels to the
    raw points by nearest neighbor.

    Sphere centers are drawn among the currently least-voted points, so every
    pass raises the minimum vote count or shrinks the set holding it.
    """
    model = checkpoint.build_model() if isinstance(checkpoint, Checkpoint) else checkpoint
    config = model.config
    min_votes = config.min_votes if min_votes is None else min_votes
    if min_votes < 1:
        raise ValueError("min_votes must be >= 1")
    log = log or logger.debug
    dtype = np.dtype(config.precision)
    prepared = prepared or prepare_cloud(cloud, config)
    sub = prepared.cloud
    rng = np.random.default_rng(seed)
    votes = np.zeros(len(sub), dtype=np.int64)
    total = np.zeros((len(sub), model.num_classes))
    model.eval()
    spheres = 0
    with ad.precision(dtype):
        while votes.min() < min_votes:
            lowest = np.flatnonzero(votes == votes.min())
            center = sub.positions[rng.choice(lowest)]
            batch = make_batch(prepared, [center], config, rng, training=False)
            logits = model(batch, seed=int(rng.integers(2**31)))
            probs = ad.softmax_rows(logits).data.astype(np.float64)
            idx = batch.point_index[0]
            total[idx] += probs
            votes[idx] += 1
            spheres += 1
            if spheres % 50 == 0:
                log(f"{spheres} spheres, min votes {votes.min()}")
    model.train()
    sub_probs = total / votes[:, None]
    sub_labels = sub_probs.argmax(axis=1)
    nearest = prepared.tree.query(cloud.positions)[1] if len(cloud) else np.zeros(0, np.int64)
    return Prediction(sub_probs[nearest], sub_labels[nearest], sub_probs, sub_labels, votes,
                      prepared, spheres)


def confusion_from_prediction(prediction: Prediction, truth: np.ndarray, class_names,
                              mode: str = "raw") -> ConfusionMatrix:
    """Confusion on raw points (``truth`` per raw point) or on the subsampled cloud."""
    if mode == "subsampled":
        return ConfusionMatrix.from_labels(prediction.prepared.cloud.label, prediction.sub_labels,
                                           len(class_names), list(class_names))
    return ConfusionMatrix.from_labels(truth, prediction.labels, len(class_names),
                                       list(class_names))


def load_prepared(manifest: DatasetManifest, paths, config: NetworkConfig) -> list[PreparedCloud]:
    return [prepare_cloud(manifest.load(p), config) for p in paths]
