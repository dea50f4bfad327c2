#!/usr/bin/env python3
"""Shared-head vs naive forward/backward counts for every stage pair of a config."""

import argparse
from pathlib import Path

from bixnas.audit import fairness_and_cost_audit
from bixnas.config import load_config
from bixnas.tasks import synth_blobs

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.toml"))
    ap.add_argument("--samples", type=int)
    ap.add_argument("--steps", type=int, default=2)
    args = ap.parse_args()
    cfg = load_config(args.config)
    s = args.samples or cfg.phase2.samples
    d = cfg.data
    data = synth_blobs(d.n, d.hw, cfg.supernet.num_classes, cfg.seed, cfg.supernet.in_channels, d.val_frac)
    print(f"{'pair':>4} {'shared':>7} {'naive':>6} {'ratio':>6} {'fair':>5} {'naive fair':>10} match")
    for pair in range(cfg.supernet.n_stages - 1, 0, -1):
        rep = fairness_and_cost_audit(cfg.supernet, data, pair, s, args.steps, cfg.seed)
        c = rep["cost"]
        print(
            f"{pair:>4} {c['shared']['measured_total']:>7.0f} {c['naive']['measured_per_step']['stage_forwards']:>6.0f}"
            f" {c['forward_ratio_shared_over_naive']:>6.3f} {str(rep['shared_fairness']['passed']):>5}"
            f" {str(rep['naive_fairness']['passed']):>10} {c['match']}"
        )


if __name__ == "__main__":
    main()
