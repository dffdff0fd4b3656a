"""Linearizations in alpha-beta, dq and complex-phase coordinates.

Voltage-source devices are anything with ``f(v, i) -> v_dot`` on real
2-vectors (alpha-beta).  Complex-phase linearizations additionally accept
:class:`~cphase.device.NormalFormParams` (exact) or objects exposing
``eta(sigma, phi, p, q)``.  The complex-phase model uses the ordering
state ``[sigma, phi]`` and input ``[Q, P]`` throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.linalg import null_space

from .coords import as_complex, as_vector, rotation_matrix
from .device import NormalFormParams
from .network import Network, OperatingPoint, power_flow_jacobian

R90 = rotation_matrix(np.pi / 2)
PHI_COLUMN_TOL = 1e-9
PHI_COLUMN_REJECT = 1e-6


class PhaseInvarianceError(ValueError):
    """The device dynamics depend on the absolute phase."""


def _f_of(device) -> Callable:
    return device.f if hasattr(device, "f") else device


def _central_jacobian(fun, x0: np.ndarray, h: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for k in range(x0.size):
        dx = np.zeros_like(x0)
        dx[k] = h
        fp = np.asarray(fun(x0 + dx), dtype=float)
        fm = np.asarray(fun(x0 - dx), dtype=float)
        col = (fp - fm) / (2 * h)
        if not np.all(np.isfinite(col)):
            raise FloatingPointError("non-finite derivative sample")
        cols.append(col)
    return np.column_stack(cols)


def linearize_alphabeta(device_f, v_ref, i_ref):
    """Jacobians ``J = df/dv`` and ``D = df/di`` at ``(v_ref, i_ref)`` by central differences."""
    f = _f_of(device_f)
    v0 = as_vector(as_complex(v_ref))
    i0 = as_vector(as_complex(i_ref))
    hv = 1e-6 * max(1.0, float(np.linalg.norm(v0)))
    hi = 1e-6 * max(1.0, float(np.linalg.norm(i0)))
    J = _central_jacobian(lambda v: f(v, i0), v0, hv)
    D = _central_jacobian(lambda i: f(v0, i), i0, hi)
    return J, D


@dataclass(frozen=True)
class LinearModelAB:
    """Time-periodic alpha-beta linearization along ``v(t) = R(omega t) v(0)``."""

    device_f: Callable
    omega: float
    v0: complex
    i0: complex

    def at(self, t: float):
        rot = np.exp(1j * self.omega * t)
        return linearize_alphabeta(self.device_f, self.v0 * rot, self.i0 * rot)

    def j_of_t(self, t: float) -> np.ndarray:
        return self.at(t)[0]

    def d_of_t(self, t: float) -> np.ndarray:
        return self.at(t)[1]

    @property
    def period(self) -> float:
        return 2 * np.pi / abs(self.omega) if self.omega else np.inf


def linearize_alphabeta_trajectory(device_f, omega: float, v0, i0) -> LinearModelAB:
    return LinearModelAB(_f_of(device_f), float(omega), complex(as_complex(v0)), complex(as_complex(i0)))


def phase_condition_violation(device_f, v, i, angles=None) -> float:
    """Largest ``|R(-a) f(R(a) v, R(a) i) - f(v, i)|`` over test angles."""
    f = _f_of(device_f)
    if angles is None:
        angles = np.random.default_rng(12345).uniform(-np.pi, np.pi, 4)
    v = as_vector(as_complex(v))
    i = as_vector(as_complex(i))
    f0 = np.asarray(f(v, i), dtype=float)
    worst = 0.0
    for a in angles:
        R = rotation_matrix(a)
        fr = R.T @ np.asarray(f(R @ v, R @ i), dtype=float)
        worst = max(worst, float(np.linalg.norm(fr - f0)))
    return worst


@dataclass(frozen=True)
class LinearModelDQ:
    j_dq: np.ndarray
    d_dq: np.ndarray
    frame_omega: float
    linearization_phi: float


def linearize_dq(device_f, frame_omega: float, v_ref_dq, i_ref_dq, check: bool = True) -> LinearModelDQ:
    """Constant dq model ``J(v, i) - frame_omega R(pi/2)`` and ``D(v, i)``."""
    if check:
        bad = phase_condition_violation(device_f, v_ref_dq, i_ref_dq)
        scale = max(1.0, float(np.linalg.norm(_f_of(device_f)(as_vector(as_complex(v_ref_dq)), as_vector(as_complex(i_ref_dq))))))
        if bad > 1e-8 * scale:
            raise PhaseInvarianceError(f"device violates the phase-shift condition by {bad:.3e}")
    J, D = linearize_alphabeta(device_f, v_ref_dq, i_ref_dq)
    return LinearModelDQ(J - frame_omega * R90, D, float(frame_omega), float(np.angle(as_complex(v_ref_dq))))


def invariant_direction_residual(J, D, v_ref, i_ref, frame_omega: float = 0.0) -> float:
    """``|J R(pi/2) v + D R(pi/2) i|``: vanishes at equilibria of phase-invariant devices.

    ``J`` is taken in a frame rotating at ``frame_omega`` (pass the alpha-beta
    Jacobian together with the frame frequency, or an already shifted dq
    Jacobian with the default 0).  For a phase-invariant device the residual
    equals ``|f|`` in that frame, so it vanishes exactly at the frame's fixed
    points.
    """
    v = as_vector(as_complex(v_ref))
    i = as_vector(as_complex(i_ref))
    Jf = np.asarray(J) - frame_omega * R90
    return float(np.linalg.norm(Jf @ R90 @ v + np.asarray(D) @ R90 @ i))


@dataclass(frozen=True)
class LinearModelCP:
    """``[sigma, phi]' = j_eta [dsigma, dphi] + d_eta [dQ, dP]``."""

    j_eta: np.ndarray
    d_eta: np.ndarray
    op_sigma: float
    op_p: float
    op_q: float
    phi_column: float = 0.0  # size of the phi column before it was zeroed

    def input_form(self):
        """Equivalent ``(alpha_tilde, d_eta)`` with ``eta = d_eta [dQ + alpha_tilde dsigma, dP]``.

        Only exists when the sigma column of ``j_eta`` is parallel to the
        ``Q`` column of ``d_eta``.
        """
        dq = self.d_eta[:, 0]
        js = self.j_eta[:, 0]
        nq = float(dq @ dq)
        if nq == 0.0:
            raise ValueError("no reactive-power response; alpha_tilde undefined")
        alpha = float(dq @ js) / nq
        if np.linalg.norm(js - alpha * dq) > 1e-9 * max(1.0, np.linalg.norm(js)):
            raise ValueError("sigma column is not proportional to the Q column")
        return alpha, self.d_eta.copy()

    @classmethod
    def from_input_form(cls, alpha: float, d_eta, op_sigma=0.0, op_p=0.0, op_q=0.0) -> "LinearModelCP":
        d_eta = np.asarray(d_eta, dtype=float)
        j = np.zeros((2, 2))
        j[:, 0] = alpha * d_eta[:, 0]
        return cls(j, d_eta, op_sigma, op_p, op_q)


def _bus_view(op, bus):
    if isinstance(op, OperatingPoint):
        return float(op.sigma[bus]), float(op.phi[bus]), float(op.p[bus]), float(op.q[bus])
    sigma, phi, p, q = op
    return float(sigma), float(phi), float(p), float(q)


def dc_gain(params: NormalFormParams) -> np.ndarray:
    """``T(0) = D - C A^-1 B``."""
    if params.n_x == 0:
        return params.D.copy()
    return params.D - params.C @ np.linalg.solve(params.A, params.B)


def linearize_complex_phase(device, op, bus: int = 0, omega_ref: float = 0.0) -> LinearModelCP:
    """Linearize ``eta`` in ``(sigma, phi, Q, P)`` at a bus operating point.

    ``op`` is an :class:`OperatingPoint` (with ``bus``) or a tuple
    ``(sigma, phi, p, q)``.  H-W devices are handled exactly (internal states
    eliminated at ``s = 0``).  Other devices are differentiated numerically,
    via ``device.eta`` when available and otherwise through the voltage
    dynamics as ``f / v - j omega_ref``.
    """
    sigma, phi, p, q = _bus_view(op, bus)
    if isinstance(device, NormalFormParams):
        G = dc_gain(device)
        v = np.exp(sigma)
        j = np.column_stack([G[:, 2] * v, np.zeros(2)])
        d = np.column_stack([G[:, 1], G[:, 0]])
        return LinearModelCP(j, d, sigma, p, q, 0.0)

    if hasattr(device, "eta"):
        eta = device.eta
    else:
        f = _f_of(device)

        def eta(s_, f_, p_, q_):
            v = np.exp(s_ + 1j * f_)
            i = np.conj((p_ + 1j * q_) / v)
            dv = as_complex(np.asarray(f(as_vector(v), as_vector(i)), dtype=float))
            z = dv / v - 1j * omega_ref
            return np.array([z.real, z.imag])

    x0 = np.array([sigma, phi, q, p])
    # cube root of machine epsilon balances truncation and round-off
    h = 6e-6 * max(1.0, float(np.max(np.abs(x0))))
    jac = _central_jacobian(lambda x: eta(x[0], x[1], x[3], x[2]), x0, h)
    phi_col = float(np.max(np.abs(jac[:, 1])))
    if phi_col > PHI_COLUMN_REJECT:
        raise PhaseInvarianceError(f"complex frequency depends on phi (|d eta / d phi| = {phi_col:.3e})")
    j = jac[:, :2].copy()
    j[:, 1] = 0.0
    return LinearModelCP(j, jac[:, 2:].copy(), sigma, p, q, phi_col)


@dataclass(frozen=True)
class FullSystemModel:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    deflated_eigenvalues: np.ndarray
    labels: tuple
    zero_mode_residual: float

    @property
    def max_real(self) -> float:
        """Largest real part once the global phase mode is removed."""
        if self.deflated_eigenvalues.size == 0:
            return -np.inf
        return float(np.max(self.deflated_eigenvalues.real))


def full_system_jacobian(devices: Mapping[int, NormalFormParams], net: Network, op: OperatingPoint) -> FullSystemModel:
    """State matrix of H-W devices coupled through lossless lines (shunts may be lossy).

    States per bus are ``(x_c, sigma, phi)``.  The global phase direction is an
    exact null vector and is deflated before reporting stability eigenvalues.
    """
    if not net.lines_lossless:
        raise ValueError("eigenvalue oracle only covers networks with lossless lines")
    n = net.n_bus
    if sorted(devices) != list(range(n)):
        raise ValueError("every bus must carry an H-W device")
    jpf = power_flow_jacobian(net, op)
    sizes = [devices[b].n_x + 2 for b in range(n)]
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    N = int(off[-1])
    sig_idx = [off[b] + devices[b].n_x for b in range(n)]
    phi_idx = [off[b] + devices[b].n_x + 1 for b in range(n)]
    theta_idx = np.array(sig_idx + phi_idx)

    M = np.zeros((N, N))
    labels = []
    for b in range(n):
        prm = devices[b]
        nx = prm.n_x
        # d e_b / d (sigma, phi) over all buses
        E = np.zeros((3, 2 * n))
        E[0] = jpf[b]
        E[1] = jpf[n + b]
        E[2, b] = op.v_mag[b]
        xs = slice(off[b], off[b] + nx)
        if nx:
            M[xs, xs] = prm.A
            M[xs, theta_idx] += prm.B @ E
            M[sig_idx[b] : phi_idx[b] + 1, xs] = prm.C
        M[sig_idx[b] : phi_idx[b] + 1, theta_idx] += prm.D @ E
        labels += [f"bus{b}_x{k}" for k in range(nx)] + [f"bus{b}_sigma", f"bus{b}_phi"]

    u = np.zeros(N)
    u[phi_idx] = 1.0 / np.sqrt(n)
    resid = float(np.linalg.norm(M @ u))
    W = null_space(u[None, :])
    return FullSystemModel(M, np.linalg.eigvals(M), np.linalg.eigvals(W.T @ M @ W), tuple(labels), resid)


def _rk4(fun, x0, t, inputs):
    """Fixed-step RK4 for ``x' = fun(x, u)`` with ``u`` held per step."""
    x = np.array(x0, dtype=float)
    out = np.empty((t.size, x.size))
    out[0] = x
    for k in range(t.size - 1):
        h = t[k + 1] - t[k]
        u = inputs[k]
        k1 = fun(x, u)
        k2 = fun(x + 0.5 * h * k1, u)
        k3 = fun(x + 0.5 * h * k2, u)
        k4 = fun(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = x
    return out


def _admittance_matrix(y: complex) -> np.ndarray:
    return np.array([[y.real, -y.imag], [y.imag, y.real]])


@dataclass
class PhaseDriftResult:
    t: np.ndarray
    v_dq_true: np.ndarray
    v_dq_linear: np.ndarray
    theta_true: np.ndarray  # (n, 2) sigma and co-moving phi
    theta_linear: np.ndarray
    t_restore: float
    nrmse_dq: np.ndarray
    nrmse_cp: np.ndarray

    @property
    def ratio(self) -> float:
        return float(np.max(self.nrmse_dq) / max(np.max(self.nrmse_cp), 1e-300))


def phase_drift_study(
    params: NormalFormParams,
    load: complex = 1.0 + 0.1j,
    imbalance: float = 0.3,
    t_on: float = 1.0,
    duration: float = 2.0,
    t_end: float = 8.0,
    dt: float = 1e-3,
    omega_nom: float = 2 * np.pi * 50,
) -> PhaseDriftResult:
    """Temporary load imbalance on a single stateless droop device.

    The device feeds a constant-impedance load drawing ``load`` (P + jQ) at
    ``V = v_set``; the load is scaled by ``1 + imbalance`` on ``[t_on, t_on +
    duration)``.  Returns the nonlinear trajectory, the prediction of the
    fixed-point dq linearization and that of the complex-phase linearization,
    and range-normalized errors over the window after restoration.
    """
    from .device import DroopVoltageSource, Setpoints
    from .network import GridEvent, Network
    from .sim import Scenario, simulate
    from .sysid import nrmse

    if params.n_x != 0:
        raise ValueError("phase_drift_study uses a stateless droop device")
    v0 = params.setpoints.v_set
    load = complex(load)
    sp = Setpoints(load.real, load.imag, v0)
    params = params.with_setpoints(sp)
    y = load.conjugate() / v0**2
    net = Network(1, {}, (y,), ("device",))
    op = OperatingPoint(np.array([v0]), np.array([0.0]), np.array([load.real]), np.array([load.imag]))
    events = (
        GridEvent(t_on, "scale_load", (0, 1 + imbalance)),
        GridEvent(t_on + duration, "scale_load", (0, 1 / (1 + imbalance))),
    )
    sc = Scenario(net, {0: params}, op, events=events, t_end=t_end, dt=dt, omega_nom=omega_nom)
    traj = simulate(sc)
    t = traj.t
    scale = np.ones(t.size)
    k_on, k_off = int(round(t_on / dt)), int(round((t_on + duration) / dt))
    scale[k_on:k_off] = 1 + imbalance
    ds = scale - 1.0

    v_dq_true = traj.dq(omega_nom, 0.0)[:, 0]
    theta_true = np.column_stack([traj.sigma[:, 0], traj.phi[:, 0] - omega_nom * t])

    dev = DroopVoltageSource(params, omega_nom=omega_nom)
    vref = complex(v0)
    iref = y * vref
    dq = linearize_dq(dev, omega_nom, vref, iref)
    Ym = _admittance_matrix(y)
    A_dq = dq.j_dq + dq.d_dq @ Ym
    b_dq = dq.d_dq @ Ym @ as_vector(vref)
    dv = _rk4(lambda x, u: A_dq @ x + b_dq * u, np.zeros(2), t, ds)
    v_dq_lin = vref + dv[:, 0] + 1j * dv[:, 1]

    cp = linearize_complex_phase(params, (np.log(v0), 0.0, load.real, load.imag))
    # P + jQ = V^2 s conj(y): linearize in sigma and in the load scale s
    s_load = v0**2 * y.conjugate()
    dPQ_dsigma = np.array([2 * s_load.imag, 2 * s_load.real])  # [dQ, dP]
    dPQ_ds = np.array([s_load.imag, s_load.real])
    A_cp = cp.j_eta + np.outer(cp.d_eta @ dPQ_dsigma, [1.0, 0.0])
    b_cp = cp.d_eta @ dPQ_ds
    dth = _rk4(lambda x, u: A_cp @ x + b_cp * u, np.zeros(2), t, ds)
    theta_lin = np.array([np.log(v0), 0.0]) + dth

    post = t >= t_on + duration

    def window_nrmse(pred, ref):
        rng = np.ptp(ref, axis=0)
        denom = np.where(rng < 1e-9, np.linalg.norm(ref, axis=0) / np.sqrt(ref.shape[0]), rng)
        return nrmse(pred[post], ref[post], scale=denom)

    vt = np.column_stack([v_dq_true.real, v_dq_true.imag])
    vl = np.column_stack([v_dq_lin.real, v_dq_lin.imag])
    return PhaseDriftResult(
        t, v_dq_true, v_dq_lin, theta_true, theta_lin, t_on + duration, window_nrmse(vl, vt), window_nrmse(theta_lin, theta_true)
    )
