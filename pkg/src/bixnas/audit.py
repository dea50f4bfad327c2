"""Side-by-side fairness and cost audit of shared-head vs. per-tail training."""

from __future__ import annotations

from bixnas import complexity as cx
from bixnas.phase2 import run_naive_steps, run_shared_steps, verify_fairness
from bixnas.supernet import SuperNetConfig, block_key, build_supernet, parse_key, searching_blocks


def cross_only_candidates(config: SuperNetConfig) -> dict:
    """Two cross-stage skips per block (same level and a neighbour).

    Every stage stays reachable under any sampled subset, so per-stage
    forward counts are well defined.
    """
    cands = {}
    for key in searching_blocks(config):
        t, l = parse_key(key)
        other = l + 1 if l < config.levels else l - 1
        levels = sorted({l, other})[: config.n_streams - 2] if config.n_streams - 2 >= 2 else [l]
        cands[key] = tuple(block_key(t - 1, m) for m in levels)
    return cands


def fairness_and_cost_audit(
    config: SuperNetConfig, data, pair: int, samples: int, steps: int, seed: int = 0, candidates=None
):
    candidates = candidates or cross_only_candidates(config)
    shared_net = build_supernet(config, seed)
    naive_net = build_supernet(config, seed)
    s_trace, s_counts, _ = run_shared_steps(shared_net, candidates, pair, data, samples, steps, seed)
    n_trace, n_counts, _ = run_naive_steps(naive_net, candidates, pair, data, samples, steps, seed)
    return {
        "shared_fairness": verify_fairness(s_trace),
        "naive_fairness": verify_fairness(n_trace),
        "cost": cx.cost_formula_audit(config.iterations, samples, pair, {"naive": n_counts, "shared": s_counts}),
        "traces": (s_trace, n_trace),
    }
