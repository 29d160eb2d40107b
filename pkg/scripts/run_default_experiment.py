#!/usr/bin/env python3
"""Run the full default experiment and print the comparison table.

Usage: python3 scripts/run_default_experiment.py [--config configs/default.yaml] [--out runs/default]
"""

import argparse
import logging
import sys
import time
from pathlib import Path

from crashchat import experiment as ex

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "default.yaml"))
    p.add_argument("--out", default=str(ROOT / "runs" / "default"))
    p.add_argument("--force", action="store_true", help="rerun every stage")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t0 = time.perf_counter()
    res = ex.run_experiment(args.config, args.out, force=args.force)
    if not res.ok:
        print(f"failed at {res.failed_stage}: {res.error}", file=sys.stderr)
        return 1
    print((res.run_dir / "comparison.txt").read_text(), end="")
    print(f"done in {time.perf_counter() - t0:.0f}s -> {res.run_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
