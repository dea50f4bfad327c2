import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bixnas import autodiff as ad
from bixnas.errors import ConfigError
from bixnas.phase1 import (
    SelectionMatrix,
    candidates_topology,
    extract_candidates,
    init_selection_matrices,
    phi,
    selection_fuse,
    selections_from_json,
    selections_to_json,
    train_phase1,
)
from bixnas.supernet import SuperNetConfig, build_supernet, dense_topology, searching_blocks
from bixnas.tasks import TrainSchedule, synth_blobs


def sel_from(m, tau=1.0):
    return SelectionMatrix("2.1", ad.parameter(np.asarray(m, dtype=np.float64)), tau)


def streams(n, seed=0, shape=(2, 3, 4, 4)):
    rng = np.random.default_rng(seed)
    return [ad.Tensor(rng.normal(size=shape)) for _ in range(n)]


def column_votes(n, picks):
    """Matrix whose column k peaks at row picks[k]."""
    m = np.zeros((n, len(picks)))
    for k, p in enumerate(picks):
        m[p, k] = 5.0
    return m


def test_all_columns_on_one_stream():
    xs = streams(5)
    out = phi(xs, sel_from(column_votes(5, [2, 2, 2])))
    assert out.data.tobytes() == xs[2].data.tobytes()


def test_unique_picks_are_averaged():
    xs = streams(5)
    out = phi(xs, sel_from(column_votes(5, [1, 3, 3])))
    np.testing.assert_allclose(out.data, (xs[1].data + xs[3].data) / 2, rtol=0, atol=1e-15)


def test_train_with_zero_noise_equals_eval():
    rng = np.random.default_rng(4)
    xs = streams(5, seed=1)
    sel = sel_from(rng.normal(size=(5, 3)))
    train = phi(xs, sel, mode="train", noise=np.zeros((5, 3)))
    assert train.data.tobytes() == phi(xs, sel, mode="eval").data.tobytes()


def test_columns_are_one_hot():
    sel = sel_from(np.random.default_rng(0).normal(size=(6, 4)))
    oh = ad.gumbel_softmax_columns(sel.m, 1.0, ad.sample_gumbel((6, 4), np.random.default_rng(1)), hard=True)
    assert oh.data.shape == (6, 4)
    assert set(np.unique(oh.data)) <= {0.0, 1.0}
    np.testing.assert_array_equal(oh.data.sum(axis=0), np.ones(4))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(3, 7))
def test_output_in_convex_hull(seed, n):
    rng = np.random.default_rng(seed)
    xs = streams(n, seed=seed, shape=(1, 1, 3, 3))
    out = phi(xs, sel_from(rng.normal(size=(n, n - 2))), mode="train", rng=rng).data
    stack = np.stack([x.data for x in xs])
    assert np.all(out >= stack.min(axis=0) - 1e-12) and np.all(out <= stack.max(axis=0) + 1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(3, 7))
def test_row_permutation_invariance(seed, n):
    """Permuting streams together with matrix rows leaves the output unchanged."""
    rng = np.random.default_rng(seed)
    xs = streams(n, seed=seed, shape=(1, 2, 2, 2))
    m = rng.normal(size=(n, n - 2))
    perm = rng.permutation(n)
    a = phi(xs, sel_from(m)).data
    b = phi([xs[i] for i in perm], sel_from(m[perm])).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_phi_rejects_bad_input():
    with pytest.raises(ConfigError):
        phi(streams(2), sel_from(np.zeros((2, 1))))
    with pytest.raises(ConfigError):
        phi(streams(4), sel_from(np.zeros((4, 2))), mode="train")
    with pytest.raises(ConfigError):
        phi(streams(4), sel_from(np.zeros((4, 2))), mode="sideways")


# --- candidate extraction ---------------------------------------------------


def brute_candidates(m):
    out = set()
    for k in range(m.shape[1]):
        col = m[:, k]
        best = max(range(len(col)), key=lambda i: (col[i], -i))
        out.add(best)
    return tuple(sorted(out))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(3, 8), ties=st.booleans())
def test_extract_matches_brute_force(seed, n, ties):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 3, size=(n, n - 2)).astype(float) if ties else rng.normal(size=(n, n - 2))
    cand = extract_candidates(sel_from(m))
    assert cand.skips == brute_candidates(m)
    assert 1 <= len(cand) <= n - 2


def test_zero_matrix_picks_first_stream():
    assert extract_candidates(sel_from(np.zeros((5, 3)))).skips == (0,)


def test_every_distinct_column_pattern():
    n = 4
    for picks in itertools.product(range(n), repeat=n - 2):
        assert extract_candidates(sel_from(column_votes(n, picks))).skips == tuple(sorted(set(picks)))


def test_init_needs_three_streams():
    with pytest.raises(ConfigError):
        init_selection_matrices(SuperNetConfig(levels=1, iterations=2))
    sels = init_selection_matrices(SuperNetConfig(levels=3, iterations=2))
    assert sorted(sels) == sorted(searching_blocks(SuperNetConfig(levels=3, iterations=2)))
    assert all(s.m.shape == (4, 2) for s in sels.values())


def test_selection_json_round_trip():
    cfg = SuperNetConfig(levels=2, iterations=2)
    sels = init_selection_matrices(cfg, tau=0.5)
    for i, s in enumerate(sels.values()):
        s.m.data[i % 3, 0] = 1.25
    back = selections_from_json(selections_to_json(sels))
    assert candidates_topology(cfg, back) == candidates_topology(cfg, sels)
    assert all(back[k].tau == 0.5 for k in back)


# --- training ---------------------------------------------------------------


def _train(seed, epochs=6):
    cfg = SuperNetConfig(levels=2, iterations=2, base_channels=4)
    ds = synth_blobs(16, 8, seed=2)
    net = build_supernet(cfg, seed=seed)
    sched = TrainSchedule(epochs=epochs, lr=3e-3, decay="inverse_time", rate=3e-3, batch_size=4)
    return cfg, net, train_phase1(net, ds, sched, seed=seed)


def test_phase1_learns_and_is_deterministic():
    cfg, _, a = _train(0)
    _, _, b = _train(0)
    assert a.log == b.log and a.candidates == b.candidates
    assert a.log[-1]["train_loss"] < a.log[0]["train_loss"]
    for key, srcs in a.candidates.items():
        assert 1 <= len(srcs) <= cfg.n_streams - 2


def test_single_optimizer_covers_weights_and_matrices():
    cfg, net, res = _train(1, epochs=1)
    assert len(res.optimizer.param_groups) == 1
    group = {id(p) for p in res.optimizer.params}
    assert {id(p) for p in net.parameters()} <= group
    assert {id(s.m) for s in res.selections.values()} <= group
    assert len(group) == len(net.parameters()) + len(res.selections)
    # the matrices actually moved
    assert any(np.abs(s.m.data).max() > 0 for s in res.selections.values())


def test_missing_matrix_rejected():
    cfg = SuperNetConfig(levels=2, iterations=2, base_channels=2)
    sels = init_selection_matrices(cfg)
    sels.pop(next(iter(sels)))
    with pytest.raises(ConfigError):
        train_phase1(build_supernet(cfg), synth_blobs(4, 8), TrainSchedule(epochs=1), sels)


def test_fused_forward_is_a_dense_subnetwork():
    """Eval-mode fusion equals running the extracted candidate topology when each block keeps one stream."""
    cfg = SuperNetConfig(levels=2, iterations=2, base_channels=2, dtype="float64")
    sels = init_selection_matrices(cfg)
    rng = np.random.default_rng(0)
    for s in sels.values():
        s.m.data[int(rng.integers(0, cfg.n_streams)), :] = 3.0
    net = build_supernet(cfg)
    x = rng.normal(size=(1, 3, 8, 8))
    with ad.no_grad():
        fused = net.forward(x, dense_topology(cfg), fuse=selection_fuse(sels, "eval")).data
        plain = net.forward(x, candidates_topology(cfg, sels)).data
    np.testing.assert_allclose(fused, plain, rtol=0, atol=1e-12)
