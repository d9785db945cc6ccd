#!/usr/bin/env python3
"""Run the permission-count ladder and print a results table.

Each rung gets a fresh federation so counts never accumulate. The table
mirrors the load-report columns: requests, rps, min/avg/max, p75, p99.9.

Usage:
    python scripts/run_load_ladder.py [--users 20] [--duration 10]
"""

import argparse
import json

from fedsec.sim.loadgen import run_ladder
from fedsec.sim.presets import load_topology


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--users", type=int, default=20)
    parser.add_argument("--duration", type=float, default=10.0)
    parser.add_argument("--ladder", default="1000,10000,25000,50000")
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    ladder = [int(x) for x in args.ladder.split(",")]
    reports = run_ladder(load_topology, ladder, args.users, duration=args.duration)

    header = f"{'perms':>8} {'users':>5} {'reqs':>7} {'rps':>8} {'min':>8} {'avg':>8} {'max':>9} {'p75':>8} {'p99.9':>9} {'fail':>5}"
    print(header)
    print("-" * len(header))
    for r in reports:
        print(f"{r.permissions:>8} {r.users:>5} {r.requests:>7} {r.rps:>8.1f} "
              f"{r.min_ms:>8.2f} {r.avg_ms:>8.2f} {r.max_ms:>9.2f} "
              f"{r.p75_ms:>8.2f} {r.p999_ms:>9.2f} {r.failures:>5}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2)
        print(f"\nwrote {args.out}")


if __name__ == "__main__":
    main()
