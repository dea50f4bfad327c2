#!/usr/bin/env python3
"""Finite-difference check of the dense supernet's weight gradients (float64)."""

import argparse

import numpy as np

from bixnas import autodiff as ad
from bixnas.supernet import SuperNetConfig, build_supernet


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", type=int, default=3)
    ap.add_argument("--iterations", type=int, default=2)
    ap.add_argument("--base", type=int, default=2)
    ap.add_argument("--per-tensor", type=int, default=0, help="coordinates per tensor (0 = all)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = SuperNetConfig(levels=args.levels, iterations=args.iterations, base_channels=args.base, dtype="float64")
    net = build_supernet(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(2, cfg.in_channels, 8, 8))
    y = rng.integers(0, cfg.num_classes, size=(2, 8, 8))

    def loss():
        with ad.no_grad():
            return float(ad.cross_entropy(net.forward(x, mode="train"), y).data)

    net.zero_grad()
    ad.backward(ad.cross_entropy(net.forward(x, mode="train"), y))
    eps, worst = 1e-6, (0.0, "")
    for name, p in net.params.items():
        g = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if args.per_tensor:
            idx = rng.choice(flat.size, size=min(args.per_tensor, flat.size), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            hi = loss()
            flat[i] = old - eps
            lo = loss()
            flat[i] = old
            num[j] = (hi - lo) / (2 * eps)
        scale = max(np.linalg.norm(g[idx]), np.linalg.norm(num))
        err = float(np.linalg.norm(g[idx] - num) / scale) if scale else 0.0
        worst = max(worst, (err, name))
        print(f"{name:24s} {len(idx):6d} {err:.2e}")
    print(f"worst relative error {worst[0]:.2e} ({worst[1]})")


if __name__ == "__main__":
    main()
