from dataclasses import replace
from pathlib import Path

import pytest

from stopcal.sim import SimConfig, fit_scorer, generate
from stopcal.probes import ProbeHyper

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def default_config() -> SimConfig:
    return SimConfig.from_json(FIXTURES / "sim_default.json")


@pytest.fixture(scope="session")
def small_splits(default_config):
    cfg = replace(default_config, seed=11)
    train = generate(replace(cfg, n_traces=200), "train", start=0)
    cal = generate(replace(cfg, n_traces=150), "calibration", start=200)
    test = generate(replace(cfg, n_traces=150), "test", start=350)
    return train, cal, test


@pytest.fixture(scope="session")
def consistent_scorer(small_splits):
    train, _, _ = small_splits
    return fit_scorer("consistent", train, 16, ProbeHyper(), 10)


@pytest.fixture(scope="session")
def novel_leaf_scorer(small_splits):
    train, _, _ = small_splits
    return fit_scorer("novel_leaf", train, 16, ProbeHyper(), 10)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
