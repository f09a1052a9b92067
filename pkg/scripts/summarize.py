#!/usr/bin/env python3
"""Print a compact view of a results CSV: one line per row, params inlined."""

import argparse

from knowledge_conflict.experiments import read_rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("csv")
    parser.add_argument("--metric", help="only rows with this metric")
    args = parser.parse_args()
    for row in read_rows(args.csv):
        if args.metric and row.metric != args.metric:
            continue
        params = " ".join(f"{k}={v}" for k, v in sorted(row.params.items()))
        print(f"{row.metric:<28} {row.value:>14.6g}  {params}")


if __name__ == "__main__":
    main()
