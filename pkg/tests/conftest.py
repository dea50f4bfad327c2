import numpy as np
import pytest

from bixnas.supernet import SuperNetConfig, incoming_streams, parse_key, searching_blocks


def random_topology(cfg, rng, max_size=None):
    topo = {}
    for key in searching_blocks(cfg):
        streams = incoming_streams(cfg, *parse_key(key))
        n = int(rng.integers(1, (max_size or len(streams)) + 1))
        topo[key] = tuple(str(x) for x in sorted(rng.choice(streams, size=n, replace=False), key=streams.index))
    return topo


@pytest.fixture
def desk_cfg():
    return SuperNetConfig(levels=3, iterations=2, base_channels=4, dtype="float64")


@pytest.fixture
def batch8(desk_cfg):
    return np.random.default_rng(0).normal(size=(2, desk_cfg.in_channels, 8, 8))


# Acceptance results, filled in by test_acceptance.py and echoed after the run.
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
