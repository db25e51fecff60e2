"""Command line front end over the pipeline commands.

Every flag overrides exactly one config key; the config file carries the
rest. Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from .pipeline import COMMANDS, ConfigError, PipelineConfig, PipelineError


def _parse_override(pair: str) -> tuple[str, object]:
    if "=" not in pair:
        raise ConfigError(f"--set expects key=value, got {pair!r}")
    key, _, raw = pair.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"--set expects key=value, got {pair!r}")
    try:
        import tomllib as toml
    except ModuleNotFoundError:
        import tomli as toml
    try:
        value = toml.loads(f"v = {raw}")["v"]
    except toml.TOMLDecodeError:
        value = raw  # bare strings stay strings
    return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ndtsynth",
        description="synthetic ultrasonic inspection dataset pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True,
                         help="TOML configuration file")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
        cmd.add_argument("--workdir", default=None,
                         help="override the output directory")
        cmd.add_argument("--set", action="append", default=[],
                         metavar="KEY=VALUE", dest="overrides",
                         help="override any config key (dotted path)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        if args.workdir is not None:
            cfg.set("workdir", args.workdir)
        for pair in args.overrides:
            key, value = _parse_override(pair)
            cfg.set(key, value)
        run = COMMANDS[args.command](cfg)
    except PipelineError as e:
        print(f"ndtsynth {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
