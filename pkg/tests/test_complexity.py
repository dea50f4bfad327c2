import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bixnas import autodiff as ad
from bixnas import complexity as cx
from bixnas.audit import cross_only_candidates, fairness_and_cost_audit
from bixnas.errors import ConfigError, UsageError
from bixnas.supernet import (
    INPUT_KEY,
    SuperNetConfig,
    all_route_params,
    block_sources,
    build_supernet,
    dense_topology,
    parse_key,
    required_blocks,
    route_plan,
)
from bixnas.tasks import synth_blobs

from conftest import random_topology


def brute_force_space(n, blocks):
    per_block = [m for m in range(1 << n) if 1 <= bin(m).count("1") <= n - 2]
    return sum(1 for _ in itertools.product(per_block, repeat=blocks))


def small_instances(limit=10**6):
    """Every (N, L, T) whose search space is at most ``limit``, grouped by block count."""
    out = {}
    n = 3
    while (2**n - n - 2) <= limit:
        per = 2**n - n - 2
        for lv in range(1, 40):
            for it in range(1, 40):
                b = lv * (2 * it - 1)
                if per**b <= limit:
                    out.setdefault((n, b), []).append((lv, it))
        n += 1
    return out


def test_space_full_scale_instance():
    assert cx.search_space_size(5, 4, 3) == 5**40 == 25**20 == 9094947017729282379150390625


def test_space_smallest():
    assert cx.search_space_size(3, 1, 1) == 3


def test_space_matches_enumeration_everywhere():
    instances = small_instances()
    assert (2, 1) in instances[(4, 2)]
    for (n, b), lts in instances.items():
        expected = brute_force_space(n, b)
        for lv, it in lts:
            assert cx.search_space_size(n, lv, it) == expected


def test_space_rejects_small_n():
    with pytest.raises(ConfigError):
        cx.search_space_size(2, 4, 3)


# --- MACs -------------------------------------------------------------------


def tiny():
    return SuperNetConfig(levels=3, iterations=2, base_channels=2, dtype="float64")


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_macs_equals_instrumented_execution(seed):
    cfg = tiny()
    topo = random_topology(cfg, np.random.default_rng(seed))
    net = build_supernet(cfg)
    with ad.count_macs() as counter, ad.no_grad():
        net.forward(np.zeros((2, 3, 8, 8)), topo, mode="train")
    rep = cx.macs(cfg, topo, (2, 3, 8, 8))
    assert rep.total == counter.total
    assert rep.total == sum(rep.per_block.values()) + rep.head
    assert isinstance(rep.total, int) and rep.total > 0
    assert set(rep.executed) == set(net.block_calls)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_macs_monotone_under_inclusion(seed):
    cfg = tiny()
    rng = np.random.default_rng(seed)
    big = random_topology(cfg, rng)
    small = {k: tuple(v[: int(rng.integers(1, len(v) + 1))]) for k, v in big.items()}
    assert cx.macs(cfg, small, "1x3x16x16").total <= cx.macs(cfg, big, "1x3x16x16").total
    assert cx.macs(cfg, big, "1x3x16x16").total <= cx.macs(cfg, dense_topology(cfg), "1x3x16x16").total


def test_pruned_block_costs_nothing():
    cfg = tiny()
    topo = dense_topology(cfg)
    topo["4.1"] = ("3.1",)
    topo["3.1"] = (INPUT_KEY,)
    rep = cx.macs(cfg, topo, "1x3x8x8")
    assert "2.1" not in rep.per_block and "3.2" not in rep.per_block
    assert rep.total < cx.macs(cfg, dense_topology(cfg), "1x3x8x8").total


def test_macs_shape_errors():
    cfg = tiny()
    with pytest.raises(ConfigError):
        cx.macs(cfg, dense_topology(cfg), "1x3x6x8")
    with pytest.raises(ConfigError):
        cx.macs(cfg, dense_topology(cfg), "1x3x8")
    with pytest.raises(ConfigError):
        cx.macs(cfg, dense_topology(cfg), "1x1x8x8")


# --- params -----------------------------------------------------------------


def touched_param_count(cfg, topo):
    """Oracle: parameters that receive a gradient through the sub-network."""
    net = build_supernet(cfg)
    net.zero_grad()
    out = net.forward(np.random.default_rng(0).normal(size=(2, 3, 8, 8)), topo, mode="train")
    ad.backward(ad.cross_entropy(out, np.zeros((2, 8, 8), int)))
    return sum(p.data.size for p in net.parameters() if p.grad is not None)


def test_dense_param_count_is_every_parameter():
    cfg = tiny()
    net = build_supernet(cfg)
    assert cx.param_count(cfg, dense_topology(cfg)) == sum(p.data.size for p in net.parameters())
    assert cx.unused_weight_blocks(cfg, dense_topology(cfg)) == []


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_param_count_matches_gradient_oracle(seed):
    cfg = tiny()
    topo = random_topology(cfg, np.random.default_rng(seed))
    count = cx.param_count(cfg, topo)
    assert count == touched_param_count(cfg, topo)
    dense = cx.param_count(cfg, dense_topology(cfg))
    assert count <= dense
    active_routes = {
        route_plan(cfg, k, s)["param"] for k in required_blocks(cfg, topo) for s in block_sources(cfg, topo, k)
    }
    all_used = not cx.unused_weight_blocks(cfg, topo) and active_routes == set(all_route_params(cfg))
    assert (count == dense) == all_used


def test_skipped_deepest_encoder_is_excluded():
    cfg = tiny()
    topo = dense_topology(cfg)
    for key in topo:
        kept = tuple(s for s in topo[key] if s == INPUT_KEY or parse_key(s)[1] != 3 or parse_key(s)[0] % 2 == 0)
        topo[key] = kept or topo[key][:1]
    topo["4.3"] = (INPUT_KEY,)
    assert "enc3" in cx.unused_weight_blocks(cfg, topo)
    dense = cx.param_count(cfg, dense_topology(cfg))
    assert cx.param_count(cfg, topo) <= dense - cx.block_param_count(cfg, 3)


def test_reused_block_counted_once():
    for it in (1, 2, 3):
        cfg = SuperNetConfig(levels=3, iterations=it, base_channels=2)
        blocks = 2 * sum(cx.block_param_count(cfg, l) for l in range(1, 4))
        routes = sum(p.data.size for n, p in build_supernet(cfg).params.items() if n.startswith("proj."))
        head = cfg.width(1) * cfg.num_classes + cfg.num_classes
        assert cx.param_count(cfg, dense_topology(cfg)) == blocks + routes + head


# --- cost audit -------------------------------------------------------------


@pytest.fixture(scope="module")
def audit_data():
    return synth_blobs(16, 8, seed=3)


@pytest.mark.parametrize("pair,samples", [(3, 3), (2, 3), (1, 2), (3, 1)])
def test_cost_audit_counts(audit_data, pair, samples):
    cfg = tiny()
    rep = fairness_and_cost_audit(cfg, audit_data, pair, samples, steps=2, seed=1)
    cost = rep["cost"]
    assert cost["match"], cost
    assert cost["naive"]["measured_per_step"]["stage_forwards"] == 2 * cfg.iterations * samples
    assert cost["naive"]["measured_per_step"]["stage_backwards"] == 2 * cfg.iterations * samples
    assert cost["shared"]["backward_passes_per_step"] == 1
    expected = {t: (1 if t < pair else samples) for t in range(1, 5)}
    assert cost["shared"]["measured_per_stage"] == expected
    assert cost["shared"]["formula_term_reading"] == pair + (4 - pair) * samples


def test_cost_audit_worked_example(audit_data):
    rep = fairness_and_cost_audit(tiny(), audit_data, 3, 3, steps=1, seed=0)["cost"]
    assert rep["shared"]["measured_total"] == 8
    assert rep["naive"]["measured_per_step"]["stage_forwards"] == 12
    assert rep["forward_ratio_shared_over_naive"] == pytest.approx(8 / 12)


def test_cost_audit_single_sample_coincides(audit_data):
    rep = fairness_and_cost_audit(tiny(), audit_data, 2, 1, steps=1, seed=0)["cost"]
    tail_stages = [t for t in range(2, 5)]
    assert all(rep["shared"]["measured_per_stage"][t] == 1 for t in tail_stages)
    assert rep["naive"]["measured_per_step"]["stage_forwards"] == 4


def test_cost_audit_needs_instrumentation():
    with pytest.raises(UsageError):
        cx.cost_formula_audit(2, 3, 3, {})
    with pytest.raises(UsageError):
        cx.cost_formula_audit(2, 3, 3, {"naive": {}, "shared": {}})
    with pytest.raises(UsageError):
        cx.cost_formula_audit(2, 3, 9, {"naive": {"stage_forwards": 1}, "shared": {}})


def test_cross_only_candidates_shape():
    cfg = SuperNetConfig(levels=4, iterations=3)
    cands = cross_only_candidates(cfg)
    assert all(1 <= len(v) <= cfg.n_streams - 2 for v in cands.values())
    assert all(INPUT_KEY not in v and all(parse_key(s)[0] == parse_key(k)[0] - 1 for s in v) for k, v in cands.items())
