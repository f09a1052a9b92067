"""Command-line entry point: one subcommand per experiment kind.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .experiments import (
    KINDS,
    ConfigError,
    validate_config,
    run_experiment_with_artifacts,
    write_outputs,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _subcommand(kind: str) -> str:
    return kind.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knowledge-conflict", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for kind in KINDS:
        p = sub.add_parser(_subcommand(kind), help=f"run the {kind} experiment")
        p.add_argument("--config", metavar="PATH", help="JSON config; defaults are used when omitted")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides config out_dir)")
        p.set_defaults(kind=kind)
    return parser


def _resolve_config(args):
    raw = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        if raw.get("kind", args.kind) != args.kind:
            raise ConfigError(
                f"config kind {raw['kind']!r} does not match subcommand {_subcommand(args.kind)!r}"
            )
    raw = {**raw, "kind": args.kind}
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = validate_config(raw)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        rows, artifacts = run_experiment_with_artifacts(cfg)
        written = write_outputs(rows, cfg, artifacts=artifacts)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for path in written.values():
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
