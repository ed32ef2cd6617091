"""Command-line entry point: ``lgenet <subcommand> ...``.

Failures print a single ``error: kind=<Type> message=<text>`` line on stderr
and exit with status 1; usage errors exit with status 2.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cloud_io import (DatasetManifest, read_cloud, synth_manifest, synth_scene, write_cloud)
from .config import PRESETS, NetworkConfig
from .metrics import ConfusionMatrix, evaluate, format_report, read_confusion, write_confusion

logger = logging.getLogger("lgenet")


def _say(message: str) -> None:
    print(message, flush=True)


def _config(args) -> NetworkConfig:
    if getattr(args, "config", None):
        config = NetworkConfig.load(args.config)
    else:
        config = PRESETS[args.preset]()
    overrides = {}
    for key in ("epochs", "iterations_per_epoch", "seed", "min_votes", "learning_rate"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        config = NetworkConfig.from_dict({**config.to_dict(), **overrides})
    return config


def cmd_synth(args) -> None:
    if args.manifest_dir:
        manifest = synth_manifest(args.manifest_dir, args.train_seeds, args.test_seeds,
                                  args.extent, args.density, args.format)
        print(f"wrote {len(manifest.train)} training and {len(manifest.test)} test tiles "
              f"to {args.manifest_dir}")
        return
    if not args.output:
        raise ValueError("synth needs --output or --manifest-dir")
    cloud = synth_scene(args.seed, args.extent, args.density)
    write_cloud(cloud, args.output, format=args.format)
    print(f"wrote {len(cloud)} points to {args.output}")


def cmd_segment(args) -> None:
    from .presegment import partition

    cloud = read_cloud(args.input)
    normalized = cloud.with_(intensity=np.clip(cloud.intensity / args.intensity_max, 0, 1))
    start = time.perf_counter()
    labels = partition(normalized, args.reg, args.knn)
    write_cloud(cloud.with_(segment=labels), args.output or args.input,
                format=args.format)
    print(f"{len(cloud)} points -> {labels.max() + 1 if len(labels) else 0} segments "
          f"in {time.perf_counter() - start:.1f}s")


def cmd_preprocess(args) -> None:
    """Subsample and segment every tile of a manifest into a new manifest."""
    from .pipeline import prepare_cloud

    config = _config(args)
    manifest = DatasetManifest.load_file(args.manifest)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def convert(paths):
        names = []
        for path in paths:
            prepared = prepare_cloud(manifest.load(path), config)
            name = Path(path).stem + ".prep.bin"
            write_cloud(prepared.cloud, out / name, format="binary")
            print(f"{path.name}: {len(prepared.cloud)} points, "
                  f"{int(prepared.cloud.segment.max()) + 1} segments")
            names.append(name)
        return names

    prepared = DatasetManifest(classes=list(manifest.classes), train=convert(manifest.train_paths()),
                               test=convert(manifest.test_paths()), intensity_max=1.0,
                               crs=manifest.crs, units=manifest.units, root=out)
    prepared.save(out / "manifest.json")
    print(f"wrote {out / 'manifest.json'}")


def cmd_train(args) -> None:
    from .pipeline import load_prepared, train

    config = _config(args)
    manifest = DatasetManifest.load_file(args.manifest)
    if not manifest.train:
        raise ValueError("manifest lists no training tiles")
    prepared = load_prepared(manifest, manifest.train_paths(), config)
    start = time.perf_counter()
    checkpoint = train(prepared, list(manifest.classes), config, args.checkpoint, log=_say,
                       max_steps=args.max_steps)
    print(f"trained {checkpoint.epoch} epochs in {time.perf_counter() - start:.1f}s; "
          f"checkpoint {args.checkpoint}")


def _predict_one(checkpoint, manifest, path, output, min_votes, seed):
    from .pipeline import confusion_from_prediction, predict_with_voting

    cloud = manifest.load(path)
    start = time.perf_counter()
    pred = predict_with_voting(cloud, checkpoint, min_votes, seed=seed)
    raw = read_cloud(path)
    write_cloud(raw.with_(label=pred.labels.astype(np.uint8)), output, format="binary")
    print(f"{Path(path).name}: {pred.spheres} spheres, min votes {int(pred.votes.min())}, "
          f"{time.perf_counter() - start:.1f}s -> {output}")
    if pred.prepared.cloud.has_labels:
        confusion = confusion_from_prediction(pred, None, checkpoint.class_names, "subsampled")
        return confusion
    return None


def cmd_predict(args) -> None:
    from .pipeline import Checkpoint

    checkpoint = Checkpoint.load(args.checkpoint)
    if args.input:
        manifest = DatasetManifest(classes=checkpoint.class_names, intensity_max=args.intensity_max)
        jobs = [(Path(args.input), Path(args.output or Path(args.input).with_suffix(".pred.bin")))]
    else:
        if not (args.manifest and args.output_dir):
            raise ValueError("predict needs --input or --manifest with --output-dir")
        manifest = DatasetManifest.load_file(args.manifest)
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(p, out / (p.stem + ".pred.bin")) for p in manifest.test_paths()]
    total = None
    for path, output in jobs:
        confusion = _predict_one(checkpoint, manifest, path, output, args.min_votes, args.seed)
        if confusion is not None:
            total = confusion if total is None else ConfusionMatrix(
                total.counts + confusion.counts, total.class_names)
    if total is not None:
        print(format_report(evaluate(total), mode="subsampled"))


def cmd_evaluate(args) -> None:
    if args.confusion:
        confusion = read_confusion(args.confusion)
        mode = "confusion"
    else:
        if not (args.pred and args.truth):
            raise ValueError("evaluate needs --confusion or both --pred and --truth")
        names = list(args.classes) if args.classes else None
        if args.manifest:
            names = list(DatasetManifest.load_file(args.manifest, check_files=False).classes)
        preds = [read_cloud(p) for p in args.pred]
        truths = [read_cloud(p) for p in args.truth]
        if len(preds) != len(truths):
            raise ValueError("--pred and --truth need the same number of files")
        num = len(names) if names else int(max(t.label[t.label != 255].max() for t in truths)) + 1
        counts = np.zeros((num, num), dtype=np.int64)
        for p, t in zip(preds, truths):
            if len(p) != len(t):
                raise ValueError(f"prediction has {len(p)} points, truth has {len(t)}")
            counts += ConfusionMatrix.from_labels(t.label, p.label, num).counts
        confusion = ConfusionMatrix(counts, names)
        mode = "raw"
    if args.save_confusion:
        write_confusion(confusion, args.save_confusion)
    print(format_report(evaluate(confusion), mode=mode))


def cmd_gradcheck(args) -> None:
    from .gradcheck import CHECKS, TOLERANCE, run_checks

    names = list(CHECKS) if args.all or not args.block else args.block
    results = run_checks(names, seeds=tuple(range(args.seeds)))
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} seed={r.seed} "
              f"max_rel_error={r.max_error:.3e}")
    if failed:
        raise RuntimeError(f"{len(failed)} gradient checks exceed {TOLERANCE:g}")


def cmd_dump_kernels(args) -> None:
    if args.checkpoint:
        from .pipeline import Checkpoint

        layouts = Checkpoint.load(args.checkpoint).layouts
    else:
        from .kernels import init_kernel_points

        layouts = {"kernel3d": init_kernel_points(args.k3, 3, args.seed).points,
                   "kernel2d": init_kernel_points(args.k2, 2, args.seed).points}
    for name, pts in layouts.items():
        print(f"# {name} K={len(pts)} dim={pts.shape[1]}")
        for row in pts:
            print(" ".join(f"{v: .8f}" for v in row))


def cmd_init_config(args) -> None:
    PRESETS[args.preset]().save(args.output)
    print(f"wrote {args.preset} config to {args.output}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgenet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="JSON config file (overrides --preset)")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")

    p = sub.add_parser("synth", help="generate synthetic labeled tiles")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--output")
    p.add_argument("--manifest-dir", help="write train/test tiles plus manifest.json here")
    p.add_argument("--train-seeds", type=int, nargs="+", default=[1, 2])
    p.add_argument("--test-seeds", type=int, nargs="+", default=[100])
    p.add_argument("--extent", type=float, default=60.0)
    p.add_argument("--density", type=float, default=5.0)
    p.add_argument("--format", choices=["ascii", "binary"], default="binary")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="fill the segment column by unsupervised partition")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--reg", type=float, default=0.03)
    p.add_argument("--knn", type=int, default=10)
    p.add_argument("--intensity-max", type=float, default=255.0)
    p.add_argument("--format", choices=["ascii", "binary"], default="binary")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("preprocess", help="subsample and segment every tile of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output-dir", required=True)
    config_args(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    config_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations-per-epoch", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="vote-averaged prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="predict every test tile of this manifest")
    p.add_argument("--output-dir")
    p.add_argument("--input", help="predict a single cloud instead")
    p.add_argument("--output")
    p.add_argument("--intensity-max", type=float, default=255.0)
    p.add_argument("--min-votes", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="precision / recall / F1 report")
    p.add_argument("--confusion", help="confusion-matrix file (names, then C rows)")
    p.add_argument("--pred", nargs="+")
    p.add_argument("--truth", nargs="+")
    p.add_argument("--manifest", help="take class names from this manifest")
    p.add_argument("--classes", nargs="+")
    p.add_argument("--save-confusion")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks in 64-bit")
    p.add_argument("--all", action="store_true")
    p.add_argument("--block", nargs="+")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-kernels", help="print kernel point layouts as text")
    p.add_argument("--checkpoint")
    p.add_argument("--k3", type=int, default=15)
    p.add_argument("--k2", type=int, default=17)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dump_kernels)

    p = sub.add_parser("init-config", help="write a preset config as JSON")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_init_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("error: kind=Interrupted message=interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - reported as one machine-parsable line
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: kind={type(exc).__name__} command={args.command} message={message}",
              file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
