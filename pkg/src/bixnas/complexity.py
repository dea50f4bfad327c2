"""Exact cost analytics: search-space size, MACs, parameter counts, cost audits.

MAC accounting constants:
    convolution       Cin * Cout * k^2 * Hout * Wout per application
    bilinear resize   4 per output element (identity resize is free)
    normalization     1 per element
    max-pool, ReLU, element-wise average: 0 (no multiply-accumulates)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

from bixnas.errors import ConfigError, UsageError
from bixnas.supernet import (
    SuperNetConfig,
    block_sources,
    parse_key,
    required_blocks,
    route_plan,
    searching_blocks,
    stage_levels,
    block_key,
    validate_topology,
    weight_block_name,
)

RESIZE_MACS_PER_ELEMENT = 4
NORM_MACS_PER_ELEMENT = 1


def search_space_size(n: int, levels: int, iterations: int) -> int:
    """Number of sparse sub-architectures: each searching block independently
    keeps a non-empty subset of at most N-2 of its N streams."""
    if n < 3:
        raise ConfigError(f"search space needs N >= 3 (got N={n})")
    if levels < 1 or iterations < 1:
        raise ConfigError("levels and iterations must be >= 1")
    per_block = sum(comb(n, k) for k in range(1, n - 1))
    return per_block ** (levels * (2 * iterations - 1))


@dataclass
class MacsReport:
    total: int
    per_block: dict = field(default_factory=dict)
    executed: list = field(default_factory=list)
    head: int = 0

    def to_dict(self) -> dict:
        return {"total": self.total, "head": self.head, "executed": self.executed, "per_block": self.per_block}


def _parse_shape(input_shape):
    if isinstance(input_shape, str):
        try:
            input_shape = tuple(int(v) for v in input_shape.lower().split("x"))
        except ValueError as exc:
            raise ConfigError(f"bad input shape {input_shape!r}, expected BxCxHxW") from exc
    if len(input_shape) != 4:
        raise ConfigError(f"input shape must have 4 dims, got {input_shape}")
    return tuple(int(v) for v in input_shape)


def macs(config: SuperNetConfig, topology: dict, input_shape) -> MacsReport:
    b, c_in, h, w = _parse_shape(input_shape)
    if c_in != config.in_channels:
        raise ConfigError(f"input has {c_in} channels, config expects {config.in_channels}")
    f = 2 ** (config.levels - 1)
    if h % f or w % f:
        raise ConfigError(f"input {h}x{w} not divisible by 2^(L-1) = {f}")
    topology = validate_topology(config, topology)
    executed = required_blocks(config, topology)
    per_block = {}
    order = [block_key(t, l) for t in range(1, config.n_stages + 1) for l in stage_levels(config, t)]
    for key in order:
        if key not in executed:
            continue
        _, level = parse_key(key)
        hw = (h // 2 ** (level - 1)) * (w // 2 ** (level - 1))
        c = config.width(level)
        cost = 0
        for src in block_sources(config, topology, key):
            plan = route_plan(config, key, src)
            if plan["align"] == "resize":
                cost += RESIZE_MACS_PER_ELEMENT * plan["cin"] * hw
            cost += plan["cin"] * plan["cout"] * hw
        cost += 2 * (c * c * 9 * hw) + 2 * NORM_MACS_PER_ELEMENT * c * hw
        per_block[key] = b * cost
    head = b * config.width(1) * config.num_classes * h * w
    return MacsReport(sum(per_block.values()) + head, per_block, [k for k in order if k in executed], head)


def block_param_count(config: SuperNetConfig, level: int) -> int:
    c = config.width(level)
    return 2 * (c * c * 9) + 2 * (2 * c)


def param_count(config: SuperNetConfig, topology: dict) -> int:
    """Trainable parameters of the sub-network; shared weights counted once."""
    topology = validate_topology(config, topology)
    executed = required_blocks(config, topology)
    blocks, routes = set(), {}
    for key in executed:
        t, l = parse_key(key)
        blocks.add((weight_block_name(t, l), l))
        for src in block_sources(config, topology, key):
            plan = route_plan(config, key, src)
            routes[plan["param"]] = plan["cin"] * plan["cout"] + plan["cout"]
    total = sum(block_param_count(config, l) for _, l in blocks)
    total += sum(routes.values())
    total += config.width(1) * config.num_classes + config.num_classes
    return total


def unused_weight_blocks(config: SuperNetConfig, topology: dict) -> list[str]:
    """Weight-bearing blocks never executed at any stage."""
    executed = required_blocks(config, validate_topology(config, topology))
    used = {weight_block_name(*parse_key(k)) for k in executed}
    everything = [f"{kind}{l}" for kind in ("enc", "dec") for l in range(1, config.levels + 1)]
    return [b for b in everything if b not in used]


def shared_forward_prediction(n_stages: int, pair: int, samples: int) -> dict:
    """Per-batch stage forwards when stages 1..pair-1 are shared and the rest run per tail."""
    return {st: (1 if st < pair else samples) for st in range(1, n_stages + 1)}


def cost_formula_audit(iterations: int, samples: int, pair: int, counts: dict) -> dict:
    """Compare instrumented forward/backward counts with the two cost models.

    ``counts`` needs a ``"naive"`` entry (stage_forwards, stage_backwards,
    steps, population) and a ``"shared"`` entry (stage_forwards as a
    stage -> count map, backward_passes, steps).
    """
    if not counts or "naive" not in counts or "shared" not in counts:
        raise UsageError("cost audit needs both 'naive' and 'shared' instrumentation")
    n_stages = 2 * iterations
    if not 1 <= pair <= n_stages - 1:
        raise UsageError(f"stage pair must lie in [1, {n_stages - 1}]")
    naive, shared = counts["naive"], counts["shared"]
    for name, rec, keys in (
        ("naive", naive, ("stage_forwards", "stage_backwards", "steps", "population")),
        ("shared", shared, ("stage_forwards", "backward_passes", "steps")),
    ):
        missing = [k for k in keys if k not in rec]
        if missing:
            raise UsageError(f"{name} instrumentation lacks {missing}")
    pop = naive["population"]
    n_steps = naive["steps"]
    naive_pred = {"stage_forwards": n_stages * pop, "stage_backwards": n_stages * pop}
    naive_meas = {
        "stage_forwards": naive["stage_forwards"] / n_steps,
        "stage_backwards": naive["stage_backwards"] / n_steps,
    }
    s_steps = shared["steps"]
    per_stage_pred = shared_forward_prediction(n_stages, pair, samples)
    per_stage_meas = {int(k): v / s_steps for k, v in shared["stage_forwards"].items()}
    shared_total_pred = sum(per_stage_pred.values())
    shared_total_meas = sum(per_stage_meas.values())
    # the closed-form term charges t head stages and 2T - t tail stages
    formula_reading = pair + (n_stages - pair) * samples
    report = {
        "iterations": iterations,
        "samples": samples,
        "pair": pair,
        "naive": {
            "predicted_per_step": naive_pred,
            "measured_per_step": naive_meas,
            "match": naive_meas["stage_forwards"] == naive_pred["stage_forwards"]
            and naive_meas["stage_backwards"] == naive_pred["stage_backwards"],
        },
        "shared": {
            "predicted_per_stage": per_stage_pred,
            "measured_per_stage": per_stage_meas,
            "predicted_total": shared_total_pred,
            "measured_total": shared_total_meas,
            "formula_term_reading": formula_reading,
            "backward_passes_per_step": shared["backward_passes"] / s_steps,
            "match": per_stage_meas == {k: float(v) for k, v in per_stage_pred.items()}
            and shared["backward_passes"] == s_steps,
        },
        "forward_ratio_shared_over_naive": shared_total_meas / naive_meas["stage_forwards"],
    }
    report["match"] = report["naive"]["match"] and report["shared"]["match"]
    return report


__all__ = [
    "MacsReport",
    "search_space_size",
    "macs",
    "param_count",
    "unused_weight_blocks",
    "cost_formula_audit",
    "shared_forward_prediction",
    "searching_blocks",
]
