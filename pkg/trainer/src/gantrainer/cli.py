"""Command line front end: parity, train, translate."""

from __future__ import annotations

import argparse
import json
import sys

from .engine import loss_parity_check, train, translate
from .models import GanTrainConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gantrainer",
        description="unpaired sim-to-experimental C-scan translation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parity", help="check loss agreement on golden vectors")
    p.add_argument("--golden", required=True)
    p.add_argument("--tolerance", type=float, default=1e-6)

    p = sub.add_parser("train", help="train both mappings")
    p.add_argument("--sim", required=True, help="simulated-domain dataset dir")
    p.add_argument("--exp", required=True, help="experimental-domain dataset dir")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="JSON file of GanTrainConfig overrides")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--decay-start-epoch", type=int)

    p = sub.add_parser("translate", help="map a simulated dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sim", required=True)
    p.add_argument("--out", required=True)
    return parser


def _config_from(args) -> GanTrainConfig:
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            overrides.update(json.load(fh))
    for key in ("epochs", "batch_size", "base_channels", "decay_start_epoch"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return GanTrainConfig(**overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "parity":
            report = loss_parity_check(args.golden)
            print(json.dumps(report, indent=2, sort_keys=True))
            if report["max_abs_deviation"] >= args.tolerance:
                print(f"parity FAILED at tolerance {args.tolerance}",
                      file=sys.stderr)
                return 1
        elif args.command == "train":
            out = train(_config_from(args), args.sim, args.exp, args.out,
                        args.seed)
            print(out)
        else:
            print(translate(args.checkpoint, args.sim, args.out))
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"gantrainer {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
