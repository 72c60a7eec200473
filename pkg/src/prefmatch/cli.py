"""Command-line entry point: ``prefmatch run`` and ``prefmatch validate``."""

from __future__ import annotations

import argparse
import sys

from .exceptions import ConfigError
from .scenarios import load_config, run, validate_config

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _jobs(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefmatch", description="Preference-matching RLHF scenarios on finite response spaces.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario and write its artifacts")
    p_run.add_argument("--config", required=True, help="scenario JSON file")
    p_run.add_argument("--out", help="output directory (defaults to the config's output_dir)")
    p_run.add_argument("--seed", type=_seed, help="override the config seed")
    p_run.add_argument("--jobs", type=_jobs, default=1, help="worker processes for grid cells")
    p_run.add_argument("--svg", action="store_true", help="also render SVG charts")

    p_val = sub.add_parser("validate", help="check a scenario file without running it")
    p_val.add_argument("--config", required=True, help="scenario JSON file")
    return parser


def _print_errors(errors, stream) -> None:
    for path, msg in errors:
        print(f"error: {path or '<root>'}: {msg}", file=stream)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, config_dir = load_config(args.config)
    except ConfigError as exc:
        _print_errors(exc.errors, sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        errors = validate_config(config, config_dir=config_dir)
        if errors:
            _print_errors(errors, sys.stdout)
            print(f"{len(errors)} error(s) in {args.config}")
            return EXIT_CONFIG
        print(f"{args.config}: ok")
        return EXIT_OK

    out = args.out or (config.get("output_dir") if isinstance(config, dict) else None)
    if not out:
        _print_errors([("output_dir", "no output directory: pass --out or set output_dir")], sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(config, out, seed=args.seed, jobs=args.jobs, svg=args.svg, config_dir=config_dir)
    except ConfigError as exc:
        _print_errors(exc.errors, sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        scenario = config.get("scenario", "?") if isinstance(config, dict) else "?"
        print(f"error: scenario {scenario!r} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{manifest.scenario}: wrote {len(manifest.outputs)} file(s) to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
