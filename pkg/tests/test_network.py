import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cphase.fixtures import random_topology
from cphase.network import (
    PQ,
    PV,
    GridEvent,
    Network,
    OperatingPoint,
    PowerFlowError,
    Slack,
    apply_event,
    build_admittance,
    kron_reduce,
    nodal_currents,
    nodal_power,
    passive_voltages,
    power_flow_jacobian,
    solve_power_flow,
)


def test_two_bus_admittance():
    net = build_admittance([(0, 1, 1.0)])
    np.testing.assert_array_equal(net.y, [[-1j, 1j], [1j, -1j]])
    v = np.array([1.0, 0.3j])
    i = nodal_currents(net, v)
    assert i[0] == pytest.approx(-1j * (v[0] - v[1]))


def test_empty_and_merged_lines():
    assert not np.any(build_admittance([], n_bus=3).y)
    net = build_admittance([(0, 1, 1.0), (1, 0, 2.0)])
    assert net.y[0, 1] == 3j
    with pytest.raises(IndexError):
        build_admittance([(0, 3, 1.0)], n_bus=2)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_admittance_symmetric_laplacian(n, seed):
    rng = np.random.default_rng(seed)
    net = build_admittance([(a, b, rng.uniform(0.5, 5)) for a, b in random_topology(rng, n)])
    np.testing.assert_array_equal(net.y, net.y.T)
    np.testing.assert_allclose(net.y.sum(axis=1), 0.0, atol=1e-12)
    assert net.lossless


def test_nodal_current_examples():
    net = build_admittance([(0, 1, 1.0)])
    np.testing.assert_allclose(nodal_currents(net, np.ones(2) * (0.7 + 0.2j)), 0.0)
    np.testing.assert_array_equal(nodal_currents(net, np.zeros(2)), 0.0)
    d = 0.3
    i = nodal_currents(net, np.array([1.0, np.exp(1j * d)]))
    assert i[0] == pytest.approx(-1j * (1 - np.exp(1j * d)), abs=1e-15)


def test_lossless_line_flow():
    b, v1, v2, d = 2.0, 1.02, 0.97, 0.25
    net = build_admittance([(0, 1, b)])
    v = np.array([v1 * np.exp(1j * d), v2])
    pw = nodal_power(net, v)
    assert pw.p[0] == pytest.approx(b * v1 * v2 * np.sin(d), rel=1e-13)
    s_direct = v * np.conj(net.y @ v)
    np.testing.assert_allclose(pw.p, s_direct.real, atol=1e-15)
    assert not np.any(nodal_power(net, np.ones(2)).p)


def test_two_bus_power_flow_against_bisection():
    from scipy.optimize import brentq

    net = build_admittance([(0, 1, 1.0)])
    op = solve_power_flow(net, [Slack(1.0, 0.0), PQ(-0.4, 0.0)])
    assert op.residual < 1e-10
    # with Q2 = 0 the 2-bus equations reduce to V2 = cos(d), P2 = -cos(d) sin(d) for d = phi_1 - phi_2
    d = brentq(lambda d: np.cos(d) * np.sin(d) - 0.4, 0.0, np.pi / 4)
    assert -op.phi[1] == pytest.approx(d, abs=1e-10)
    assert op.v_mag[1] == pytest.approx(np.cos(d), abs=1e-10)


def test_two_bus_power_flow_injection():
    net = build_admittance([(0, 1, 1.0)])
    op = solve_power_flow(net, [Slack(1.0, 0.0), PQ(0.3, 0.0)])
    pw = nodal_power(net, op.v)
    assert pw.p[1] == pytest.approx(0.3, abs=1e-10) and abs(pw.q[1]) < 1e-10
    assert op.phi[1] > 0


def test_flat_start_exact():
    net = build_admittance([(0, 1, 3.0), (1, 2, 2.0)])
    op = solve_power_flow(net, [Slack(1.0, 0.0), PQ(0, 0), PV(0, 1.0)])
    np.testing.assert_allclose(op.v, 1.0)
    assert op.iterations == 0


def test_power_flow_infeasible_and_disconnected():
    net = build_admittance([(0, 1, 1.0)])
    with pytest.raises(PowerFlowError) as err:
        solve_power_flow(net, [Slack(1.0, 0.0), PQ(2.0, 0.0)])
    assert np.isfinite(err.value.residual) or np.isnan(err.value.residual)
    with pytest.raises(PowerFlowError):
        solve_power_flow(build_admittance([], n_bus=2), [Slack(1.0, 0.0), PQ(0.1, 0.0)])


def _fd_jacobian(net, op, h=1e-6):
    n = net.n_bus
    x = np.concatenate([op.sigma, op.phi])
    cols = []
    for k in range(2 * n):
        dx = np.zeros(2 * n)
        dx[k] = h
        vals = []
        for sgn in (1, -1):
            xx = x + sgn * dx
            pw = nodal_power(net, np.exp(xx[:n] + 1j * xx[n:]))
            vals.append(np.concatenate([pw.p, pw.q]))
        cols.append((vals[0] - vals[1]) / (2 * h))
    return np.array(cols).T


def test_power_flow_jacobian_vs_fd(rng):
    net = build_admittance([(a, b, rng.uniform(0.5, 5)) for a, b in random_topology(rng, 4)], shunts=[(2, 0.3 + 0.1j)])
    v = np.exp(rng.normal(0, 0.05, 4) + 1j * rng.normal(0, 0.2, 4))
    op = OperatingPoint.from_voltages(net, v)
    jac = power_flow_jacobian(net, op)
    fd = _fd_jacobian(net, op)
    assert np.max(np.abs(jac - fd)) / np.max(np.abs(fd)) < 1e-6


def test_jacobian_phase_kernel_and_shunt_entry():
    net = build_admittance([(0, 1, 2.0), (1, 2, 1.5)])
    op = OperatingPoint.from_voltages(net, np.array([1.0, 0.98 * np.exp(-0.1j), 1.01 * np.exp(0.05j)]))
    jac = power_flow_jacobian(net, op)
    np.testing.assert_allclose(jac @ np.r_[np.zeros(3), np.ones(3)], 0.0, atol=1e-10)
    iso = build_admittance([], shunts=[(0, 0.4 - 0.2j)], n_bus=1)
    op1 = OperatingPoint.from_voltages(iso, np.array([1.1 + 0j]))
    j1 = power_flow_jacobian(iso, op1)
    # S = V^2 conj(y): dP/dsigma = 2 V^2 g
    assert j1[0, 0] == pytest.approx(2 * 1.1**2 * 0.4)
    assert j1[1, 0] == pytest.approx(2 * 1.1**2 * 0.2)


def test_events():
    net = build_admittance([(0, 1, 1.0)])
    cut = apply_event(net, GridEvent(1.0, "remove_line", (0, 1)))
    assert not np.any(cut.y)
    back = apply_event(cut, GridEvent(1.0, "add_line", (0, 1, 1.0)))
    np.testing.assert_allclose(back.y, net.y, atol=1e-15)
    with pytest.raises(KeyError):
        apply_event(cut, GridEvent(1.0, "remove_line", (0, 1)))
    chain = build_admittance([(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)])
    isl = apply_event(chain, GridEvent(0.5, "remove_line", (1, 2)))
    assert not np.any(isl.y[:2, 2:]) and not np.any(isl.y[2:, :2])
    assert np.any(net.y)


def test_scale_load_event():
    net = build_admittance([(0, 1, 1.0)], shunts=[(1, 0.5)])
    assert apply_event(net, GridEvent(0.0, "scale_load", (1, 2.0))).shunts[1] == 1.0
    with pytest.raises(ValueError):
        apply_event(net, GridEvent(0.0, "scale_load", (0, 2.0)))
    with pytest.raises(ValueError):
        GridEvent(0.0, "explode")


def test_kron_reduction_consistent(rng):
    net = build_admittance([(0, 1, 2.0), (1, 2, 3.0), (0, 2, 1.0)], shunts=[(1, 0.2)])
    keep = [0, 2]
    v_keep = np.array([1.0, 0.9 + 0.1j])
    v_mid = passive_voltages(net.y, keep, v_keep)
    v = np.array([v_keep[0], v_mid[0], v_keep[1]])
    i = net.y @ v
    assert abs(i[1]) < 1e-13
    np.testing.assert_allclose(kron_reduce(net.y, keep) @ v_keep, i[keep], atol=1e-13)


def test_power_flow_invariant_to_slack_rotation():
    net = Network(2, {(0, 1): -5j})
    a = solve_power_flow(net, [PQ(0.4, 0.1), Slack(1.0, 0.0)])
    b = solve_power_flow(net, [PQ(0.4, 0.1), Slack(1.0, 2.5)])
    np.testing.assert_allclose(b.v_mag, a.v_mag, atol=1e-12)
    np.testing.assert_allclose(b.phi - a.phi, 2.5, atol=1e-12)
