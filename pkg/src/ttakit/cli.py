"""Command line entry points.

    ttakit run --config run.yaml [--protocol N-O] [--seed 3] [--method tesla] [--out DIR]
    ttakit corrupt --clean DIR --name gaussian_noise --severity 5 --seed 0 --out DIR
    ttakit export-features --ckpt model.npz --data DIR --out features.tsv
    ttakit make-dataset --out DIR --count 2000 --seed 0
    ttakit train-source --data DIR --out model.npz [--epochs 12] [--seed 0]
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__


def _cmd_run(args) -> int:
    from .harness import load_run_config, run_experiment

    overrides = {
        "protocol": args.protocol,
        "seed": args.seed,
        "method": args.method,
        "out": args.out,
    }
    cfg = load_run_config(args.config, overrides)
    summary = run_experiment(
        cfg, resume=args.resume, stop_after_batches=args.stop_after_batches
    )
    for k, v in summary.items():
        print(f"{k}\t{v}")
    return 0


def _cmd_corrupt(args) -> int:
    from .corruptions import CorruptionSpec, build_corrupted_set

    spec = CorruptionSpec(name=args.name, severity=args.severity, seed=args.seed)
    manifest = build_corrupted_set(args.clean, spec, args.out)
    print(json.dumps(manifest, indent=2))
    return 0


def _cmd_export_features(args) -> int:
    from .harness import export_features

    count = export_features(args.ckpt, args.data, args.out)
    print(f"wrote {count} rows to {args.out}")
    return 0


def _cmd_make_dataset(args) -> int:
    from .data import make_dataset, save_dataset

    images, labels = make_dataset(args.count, args.seed, size=args.size)
    save_dataset(args.out, images, labels, {"seed": args.seed})
    print(f"wrote {args.count} images to {args.out}")
    return 0


def _cmd_train_source(args) -> int:
    from .data import load_dataset, train_and_save

    images, labels = load_dataset(args.data)
    train_and_save(
        images, labels, args.out, seed=args.seed, epochs=args.epochs, verbose=True
    )
    print(f"saved source checkpoint to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttakit", description="test-time adaptation toolkit"
    )
    parser.add_argument("--version", action="version", version=f"ttakit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one adaptation experiment")
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--protocol", choices=("N-O", "N-M"), help="override protocol")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--method", help="override adaptation method")
    p.add_argument("--out", help="override output directory")
    p.add_argument("--resume", action="store_true", help="continue a checkpointed run")
    p.add_argument("--stop-after-batches", type=int, help="checkpoint and stop early")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("corrupt", help="build a corrupted copy of a dataset")
    p.add_argument("--clean", required=True, help="clean dataset directory")
    p.add_argument("--name", required=True, help="corruption name")
    p.add_argument("--severity", required=True, type=int, choices=range(1, 6))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_corrupt)

    p = sub.add_parser("export-features", help="dump encoder features to TSV")
    p.add_argument("--ckpt", required=True, help="model checkpoint (.npz)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output TSV path")
    p.set_defaults(fn=_cmd_export_features)

    p = sub.add_parser("make-dataset", help="render the procedural dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(fn=_cmd_make_dataset)

    p = sub.add_parser("train-source", help="train the source classifier")
    p.add_argument("--data", required=True, help="clean training dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path (.npz)")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_train_source)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
