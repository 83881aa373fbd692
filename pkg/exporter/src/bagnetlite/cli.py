"""CLI: train-export and export-data."""

from __future__ import annotations

import argparse

from bagnetlite.data import DATASETS
from bagnetlite.export import export_dataset
from bagnetlite.model import ARCH_PRESETS
from bagnetlite.train import train_and_export


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bagnetlite")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-export", help="train a preset and export the weight bundle")
    p.add_argument("--dataset", choices=sorted(DATASETS), default="synth10")
    p.add_argument("--arch", choices=sorted(ARCH_PRESETS), default="cifar-lite")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=1200)
    p.add_argument("--out", required=True)

    d = sub.add_parser("export-data", help="export a dataset split as tensor files")
    d.add_argument("--dataset", choices=sorted(DATASETS), default="synth10")
    d.add_argument("--split", choices=["train", "val", "test"], default="val")
    d.add_argument("--count", type=int, default=100)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.command == "train-export":
        train_and_export(
            args.dataset, args.arch, args.epochs, args.seed, args.out, n_train=args.n_train
        )
    else:
        out = export_dataset(args.dataset, args.split, args.count, args.out, seed=args.seed)
        print(f"wrote {args.count} images to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
