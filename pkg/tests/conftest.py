import numpy as np
import pytest

from cphase.device import Setpoints, droop_params
from cphase.network import PQ, Network, Slack, solve_power_flow


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def droop_pair():
    """Two stateless droop devices joined by one line, at a solved equilibrium."""
    net = Network(2, {(0, 1): -5j})
    op = solve_power_flow(net, [Slack(1.0, 0.0), PQ(0.3, 0.05)])
    devices = {
        b: droop_params(1.0, 1.0, None, None, Setpoints(op.p[b], op.q[b], op.v_mag[b]), alpha=3.0, n_x=0)
        for b in range(2)
    }
    return devices, net, op


_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the acceptance summary."""

    def record(number: int, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
