#!/usr/bin/env python3
"""Run every preset in configs/ and write results under results/<preset name>/."""

import argparse
import json
import sys
from pathlib import Path

from knowledge_conflict import cli

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--configs", type=Path, default=ROOT / "configs")
    parser.add_argument("--out", type=Path, default=ROOT / "results")
    parser.add_argument("--seed", type=int, help="override every preset's seed")
    args = parser.parse_args()

    failures = 0
    for path in sorted(args.configs.glob("*.json")):
        kind = json.loads(path.read_text())["kind"]
        argv = [kind.replace("_", "-"), "--config", str(path), "--out", str(args.out / path.stem)]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        print(f"== {path.name}", flush=True)
        code = cli.main(argv)
        failures += code != 0
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
