#!/usr/bin/env python3
"""Run the desk-scale pipeline and print the summary.

    python scripts/run_desk_pipeline.py --out runs/desk [--resume]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from bixnas.config import load_config
from bixnas.pipeline import run_pipeline

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.toml"))
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--resume", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    t0 = time.perf_counter()
    summary = run_pipeline(load_config(args.config), args.out, resume=args.resume)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"finished in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
