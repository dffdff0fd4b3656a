"""Acceptance criteria 1 to 9; each test records one PASS/FAIL line."""
import time
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from _scenarios import W50, excited_device, excited_run, islanding_pair, relative_tf_error

from cphase.coords import as_complex, as_vector, exp_map, log_map
from cphase.device import (
    DroopVoltageSource,
    Setpoints,
    device_transfer_matrix,
    droop_params,
    error_coords,
)
from cphase.fixtures import PhaseDependentDevice, droop_test_device, hw_fixtures, random_droop_grid
from cphase.linearize import (
    R90,
    PhaseInvarianceError,
    _central_jacobian,
    full_system_jacobian,
    invariant_direction_residual,
    linearize_alphabeta,
    linearize_complex_phase,
    linearize_dq,
    phase_drift_study,
)
from cphase.network import PQ, Network, OperatingPoint, Slack, nodal_power, solve_power_flow
from cphase.sim import SlackProfile, scenario_from_power_flow, simulate
from cphase.stability import GridBounds, alpha_bound, certify, cross_validate
from cphase.sysid import build_dataset, fit_hw, nrmse, predict_closed_loop

PHASES = (0.0, 0.4, 0.8, 1.2)


class FrozenStateSource:
    """alpha-beta voltage dynamics of an H-W device with its internal state held at ``x``."""

    def __init__(self, params, omega_nom=0.0, x=None):
        self.params = params
        self.omega_nom = omega_nom
        self.x = np.zeros(params.n_x) if x is None else x

    def state_rate(self, v, i):
        return self.params.A @ self.x + self.params.B @ error_coords(as_complex(v), as_complex(i), self.params.setpoints)

    def f(self, v, i):
        e = error_coords(as_complex(v), as_complex(i), self.params.setpoints)
        rho, omega = self.params.C @ self.x + self.params.D @ e
        return as_vector(as_complex(v) * complex(rho, omega + self.omega_nom))


class PhasorEta:
    """Complex frequency of an H-W device at ``s = 0``, computed through the phasors ``v`` and ``i``."""

    def __init__(self, params):
        self.params = params
        self.gain = device_transfer_matrix(params, 0.0).real

    def eta(self, sigma, phi, p, q):
        v = np.exp(sigma + 1j * phi)
        i = np.conj((p + 1j * q) / v)
        return self.gain @ error_coords(v, i, self.params.setpoints)


def _equilibrium(params, phase=0.0):
    sp = params.setpoints
    v = sp.v_set * np.exp(1j * phase)
    return v, np.conj((sp.p_set + 1j * sp.q_set) / v)


def test_criterion_1_phase_invariance_dichotomy(criterion):
    t0 = time.perf_counter()
    dev = DroopVoltageSource(droop_test_device(0), W50)
    sp = dev.params.setpoints
    dq = [linearize_dq(dev, W50, *_equilibrium(dev.params, a)) for a in PHASES]
    cp = [linearize_complex_phase(dev, (np.log(sp.v_set), a, sp.p_set, sp.q_set)) for a in PHASES]
    ref_dq = np.hstack([dq[0].j_dq, dq[0].d_dq])
    ref_cp = np.hstack([cp[0].j_eta, cp[0].d_eta])
    dq_diff = [np.max(np.abs(np.hstack([m.j_dq, m.d_dq]) - ref_dq)) for m in dq[1:]]
    cp_diff = max(np.max(np.abs(np.hstack([m.j_eta, m.d_eta]) - ref_cp)) for m in cp[1:])
    elapsed = time.perf_counter() - t0
    ok = min(dq_diff) > 1e-3 and cp_diff < 1e-10 and elapsed < 1.0
    criterion(1, ok, f"(min dq diff {min(dq_diff):.3g} > 1e-3, cp diff {cp_diff:.2g} < 1e-10, {elapsed:.2f} s)")
    assert ok


def test_criterion_2_invariant_direction_identity(criterion):
    worst, monotone = 0.0, True
    for name, prm in hw_fixtures().items():
        src = FrozenStateSource(prm, W50)
        v, i = _equilibrium(prm, 0.3)
        J, D = linearize_alphabeta(src, v, i)

        rv, ri = R90 @ as_vector(v), R90 @ as_vector(i)
        vv, iv = as_vector(v), as_vector(i)
        Jx = _central_jacobian(lambda z: src.state_rate(z, iv), vv, 1e-6) if prm.n_x else np.zeros((0, 2))
        Dx = _central_jacobian(lambda z: src.state_rate(vv, z), iv, 1e-6) if prm.n_x else np.zeros((0, 2))
        res = np.hypot(invariant_direction_residual(J, D, v, i, frame_omega=W50), np.linalg.norm(Jx @ rv + Dx @ ri))
        worst = max(worst, res)
        off = []
        for d in (1e-3, 1e-2, 5e-2, 0.2):
            # move current and internal state off the equilibrium, then re-linearize there
            moved = FrozenStateSource(prm, W50, x=np.full(prm.n_x, d))
            Jd, Dd = linearize_alphabeta(moved, v, i * (1 + d))
            off.append(invariant_direction_residual(Jd, Dd, v, i * (1 + d), frame_omega=W50))
        monotone &= bool(np.all(np.diff(off) > 0)) and off[0] > res
    ok = worst < 1e-6 and monotone
    criterion(2, ok, f"(max residual at equilibrium {worst:.2g} < 1e-6 over {len(hw_fixtures())} fixtures, "
                     f"monotone growth off equilibrium: {monotone})")
    assert ok


def test_criterion_3_phi_column(criterion):
    worst = 0.0
    for name, prm in hw_fixtures().items():
        sp = prm.setpoints
        for phi in PHASES:
            model = linearize_complex_phase(PhasorEta(prm), (np.log(sp.v_set), phi, sp.p_set, sp.q_set))
            worst = max(worst, model.phi_column)
    dev = DroopVoltageSource(droop_test_device(0), W50)
    model = linearize_complex_phase(dev, (0.0, 0.9, 0.5, 0.1))
    worst = max(worst, model.phi_column)
    try:
        linearize_complex_phase(PhaseDependentDevice(droop_test_device(0)), (0.0, 0.3, 0.5, 0.1))
        rejected = False
    except PhaseInvarianceError:
        rejected = True
    ok = worst < 1e-9 and rejected
    criterion(3, ok, f"(max phi column {worst:.2g} < 1e-9, phase-dependent device rejected: {rejected})")
    assert ok


def test_criterion_4_phase_drift(criterion):
    t0 = time.perf_counter()
    res = phase_drift_study(droop_test_device(0), duration=2.0)
    elapsed = time.perf_counter() - t0
    dq, cp = float(np.max(res.nrmse_dq)), float(np.max(res.nrmse_cp))
    ok = res.ratio >= 5 and dq > 0.10 and cp < 0.02 and elapsed < 10
    criterion(4, ok, f"(dq NRMSE {dq:.3f} > 0.10, complex-phase NRMSE {cp:.4f} < 0.02, ratio {res.ratio:.1f} >= 5, "
                     f"{elapsed:.1f} s)")
    assert ok


def test_criterion_5_islanding(criterion):
    t0 = time.perf_counter()
    sc = islanding_pair(noise=1e-3, seed=1)
    traj = simulate(sc)
    t = traj.t
    late = t > 7.0
    dev = traj.omega[late, 0] - W50
    offset = float(np.mean(dev))
    slope = float(np.polyfit(t[late], traj.phi[late, 0] - W50 * t[late], 1)[0])
    drift = abs(offset) > 0.02 and abs(slope - offset) < 0.05 * abs(offset)

    fit = fit_hw(build_dataset(traj, 0, sc.devices[0].setpoints), 1)
    pred = predict_closed_loop(fit.params, replace(sc, noise=0.0), 0)
    vp, vm = pred.dq()[:, 0], traj.dq()[:, 0]
    err = nrmse(np.column_stack([vp.real, vp.imag]), np.column_stack([vm.real, vm.imag]))
    elapsed = time.perf_counter() - t0
    ok = drift and float(np.max(err)) < 0.05 and elapsed < 60
    criterion(5, ok, f"(post-island offset {offset:.3g} rad/s, phase slope {slope:.3g} rad/s, "
                     f"NRMSE v_d {err[0]:.3g} v_q {err[1]:.3g} < 0.05 against noisy data, {elapsed:.1f} s)")
    assert ok


def test_criterion_6_identification_round_trip(criterion):
    true = excited_device(1)
    sc, traj = excited_run(true)
    base = fit_hw(build_dataset(traj, 0, sc.devices[0].setpoints), 1)
    err_true = relative_tf_error(base.params, sc.devices[0])
    variants = {"rotated": dict(shift=0.7), "base_omega": dict(base_omega=W50), "both": dict(base_omega=W50, shift=-1.9)}
    err_inv = 0.0
    for kw in variants.values():
        sc2, traj2 = excited_run(true, **kw)
        fit2 = fit_hw(build_dataset(traj2, 0, sc2.devices[0].setpoints), 1)
        err_inv = max(err_inv, relative_tf_error(fit2.params, base.params))
    ok = err_true < 1e-4 and err_inv < 1e-6
    criterion(6, ok, f"(T(jw) error vs truth {err_true:.2g} < 1e-4, phase/frequency-shifted data {err_inv:.2g} < 1e-6)")
    assert ok


def test_criterion_7_certificate_soundness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    tally = Counter()
    sizes = Counter()
    for _ in range(240):
        devices, net, op, bounds = random_droop_grid(rng, alpha_factor=(0.8, 3.0))
        report = certify(devices, net, op, bounds)
        tally[cross_validate(report, full_system_jacobian(devices, net, op))] += 1
        sizes[net.n_bus] += 1
    # pure-droop crosstalk-free two-bus fixture
    net = Network(2, {(0, 1): -5j})
    op = solve_power_flow(net, [Slack(1.0, 0.0), PQ(0.3, 0.05)])
    devs = {b: droop_params(1.0, 1.0, None, None, Setpoints(op.p[b], op.q[b], op.v_mag[b]), alpha=3.0, n_x=0)
            for b in range(2)}
    rep = certify(devs, net, op, GridBounds.from_operating_point(net, op))
    oracle = full_system_jacobian(devs, net, op)
    fixture_ok = oracle.max_real < 0 and rep.verdict_under("text_consistent") and not rep.verdict_under("as_printed")
    elapsed = time.perf_counter() - t0
    n = sum(tally.values())
    ok = n >= 200 and tally["INCONSISTENT"] == 0 and tally["CONSISTENT"] > 0 and fixture_ok and elapsed < 300
    criterion(7, ok, f"({n} grids over bus counts {dict(sorted(sizes.items()))}: {tally['CONSISTENT']} certified and "
                     f"oracle-stable, {tally['UNDECIDED_BY_CERTIFICATE']} undecided, {tally['INCONSISTENT']} "
                     f"inconsistent; pure droop: oracle max Re {oracle.max_real:.3g}, text_consistent "
                     f"{rep.verdict_under('text_consistent')}, as_printed {rep.verdict_under('as_printed')}; "
                     f"{elapsed:.1f} s)")
    assert ok


def test_criterion_8_alpha_bound(criterion):
    b0 = alpha_bound(1.0, 1.0, 1.0, 0.0)
    b1 = alpha_bound(1.0, 1.0, 1.1, np.pi / 6)
    g = np.linspace(1.0, 1.5, 10)
    d = np.linspace(0.0, 1.4, 10)
    grid = np.array([[alpha_bound(1.0, 1.0, gi, di) for di in d] for gi in g])
    mono = bool(np.all(np.diff(grid, axis=0) >= 0) and np.all(np.diff(grid, axis=1) >= 0))
    ok = b0 == 0.0 and abs(b1 - 2 * (1.1 / np.cos(np.pi / 6) - 1)) < 1e-15 and abs(b1 - 0.5403) < 5e-5 and mono
    criterion(8, ok, f"(bound(1, 0) = {b0}, bound(1.1, pi/6) = {b1:.6f}, monotone on 10x10: {mono})")
    assert ok


def _rk4_ratio():
    prof = SlackProfile(1.0, W50, 0.3, sigma_tones=((0.02, 3.0, 0.0),), phi_tones=((0.05, 2.0, 0.1),))
    net = Network(2, {(0, 1): -4j})
    base = scenario_from_power_flow(
        net, [PQ(0.4, 0.1), Slack(1.0, 0.3)], {0: droop_test_device(2)}, {1: SlackProfile(1.0, W50, 0.3)},
        t_end=1.0, omega_nom=W50,
    )
    finals = [simulate(replace(base, slacks={1: prof}, dt=dt)).v[-1, 0] for dt in (8e-3, 4e-3, 2e-3)]
    return abs(finals[0] - finals[1]) / abs(finals[1] - finals[2])


def test_criterion_9_numerical_hygiene(criterion):
    rng = np.random.default_rng(9)
    # finite-difference Jacobians against analytic ones on the H-W fixtures
    fd_err = 0.0
    for prm in hw_fixtures().values():
        sp = prm.setpoints
        num = linearize_complex_phase(PhasorEta(prm), (np.log(sp.v_set), 0.4, sp.p_set, sp.q_set))
        ex = linearize_complex_phase(prm, (np.log(sp.v_set), 0.4, sp.p_set, sp.q_set))
        scale = max(np.max(np.abs(ex.d_eta)), np.max(np.abs(ex.j_eta)))
        fd_err = max(fd_err, np.max(np.abs(num.d_eta - ex.d_eta)) / scale, np.max(np.abs(num.j_eta - ex.j_eta)) / scale)
        s, h = 0.3 + 2.0j, 1e-5
        if prm.n_x:
            fd = (device_transfer_matrix(prm, s + h) - device_transfer_matrix(prm, s - h)) / (2 * h)
            R = np.linalg.inv(s * np.eye(prm.n_x) - prm.A)
            exact = -prm.C @ R @ R @ prm.B
            fd_err = max(fd_err, np.max(np.abs(fd - exact)) / np.max(np.abs(exact)))
    net = Network(3, {(0, 1): -6j, (1, 2): -4j, (0, 2): -3j})
    op = solve_power_flow(net, [Slack(1.0, 0.0), PQ(0.3, 0.1), PQ(-0.5, -0.1)])
    fx = hw_fixtures()
    devs = {b: d.with_setpoints(Setpoints(op.p[b], op.q[b], op.v_mag[b]))
            for b, d in zip(range(3), (fx["droop1"], fx["crosstalk2"], fx["generic3"]))}
    fd_err = max(fd_err, _oracle_fd_error(devs, net, op))

    ratio = _rk4_ratio()

    z = 10.0 ** rng.uniform(-6, 6, 2000) * np.exp(1j * rng.uniform(-np.pi, np.pi, 2000))
    back = np.array([exp_map(log_map(zk)) for zk in z])
    rt = float(np.max(np.abs(back - z) / np.abs(z)))

    pf = 0.0
    for _ in range(30):
        devices, net_r, op_r, _ = random_droop_grid(rng)
        pf = max(pf, op_r.residual)
        pw = nodal_power(net_r, op_r.v)
        pf = max(pf, float(np.max(np.abs(pw.p - op_r.p))))
    ok = fd_err < 1e-6 and 8 <= ratio <= 32 and rt < 1e-12 and pf < 1e-10
    criterion(9, ok, f"(FD vs analytic {fd_err:.2g} < 1e-6, RK4 ratio {ratio:.2f} in [8, 32], "
                     f"roundtrip {rt:.2g} < 1e-12, power-flow residual {pf:.2g} < 1e-10)")
    assert ok


def _oracle_fd_error(devs, net, op):
    n = net.n_bus
    sizes = [devs[b].n_x for b in range(n)]
    model = full_system_jacobian(devs, net, op)

    def rhs(z):
        k, th, xs = 0, [], []
        for b in range(n):
            xs.append(z[k : k + sizes[b]])
            th.append(z[k + sizes[b] : k + sizes[b] + 2])
            k += sizes[b] + 2
        th = np.array(th)
        v = np.exp(th[:, 0] + 1j * th[:, 1])
        pw = nodal_power(net, v)
        out = []
        for b in range(n):
            d = devs[b]
            e = np.array([pw.p[b] - d.setpoints.p_set, pw.q[b] - d.setpoints.q_set, abs(v[b]) - d.setpoints.v_set])
            out += [d.A @ xs[b] + d.B @ e, d.C @ xs[b] + d.D @ e]
        return np.concatenate(out)

    z0 = np.concatenate([np.r_[np.zeros(sizes[b]), op.sigma[b], op.phi[b]] for b in range(n)])
    h = 1e-6
    fd = np.column_stack([(rhs(z0 + h * u) - rhs(z0 - h * u)) / (2 * h) for u in np.eye(z0.size)])
    return float(np.max(np.abs(fd - model.matrix)) / np.max(np.abs(model.matrix)))
