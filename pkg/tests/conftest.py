import numpy as np
import pytest
import torch

from acg.policy_net import NetConfig, PolicyNet

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return NetConfig(action_dim=2, obs_dim=5, vocab=3, num_layers=4, hidden=16, heads=2, chunk=6, mlp_ratio=2, freq_dim=8)


@pytest.fixture
def small_net(small_cfg):
    return PolicyNet(small_cfg, seed=3).eval()


@pytest.fixture
def tiny_cfg():
    # <= 5k parameters, for finite-difference gradient checks
    return NetConfig(action_dim=2, obs_dim=3, vocab=2, num_layers=2, hidden=8, heads=2, chunk=4, mlp_ratio=2, freq_dim=4)


_ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one acceptance line: report(criterion, ok, detail)."""

    def record(number, ok, detail):
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE, key=str):
            terminalreporter.write_line(_ACCEPTANCE[number])
