"""Time-domain simulation of normal-form devices on an algebraic network.

Device buses integrate ``(x_c, sigma, phi)`` with fixed-step RK4, slack buses
follow a prescribed complex phase and load buses are passive constant-impedance
nodes that are Kron-reduced away.  Phases are absolute (stationary alpha-beta
frame): a device's ``phi`` advances with ``omega_nom`` plus its droop
deviation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .coords import ComplexPhase, park, unwrap_phase
from .device import NonlinearDevice, NormalFormParams, Setpoints
from .network import (
    GridEvent,
    Network,
    OperatingPoint,
    PQ,
    PV,
    Slack,
    apply_event,
    kron_reduce,
    passive_voltages,
    solve_power_flow,
)

CHANNELS = ("v_alpha", "v_beta", "v_d", "v_q", "sigma", "phi", "rho", "omega", "p", "q")
MIN_VOLTAGE = 1e-6


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SlackProfile:
    """Prescribed complex phase of a slack bus.

    ``sigma_tones`` and ``phi_tones`` are sequences of ``(amplitude,
    frequency_hz, phase)``; ``drift`` is the intensity of a random walk on the
    slack frequency (rad/s per sqrt(s)), whose integral is added to ``phi``.
    """

    base_v: float = 1.0
    base_omega: float = 0.0
    phi0: float = 0.0
    sigma_tones: tuple = ()
    phi_tones: tuple = ()
    drift: float = 0.0

    def __post_init__(self):
        if self.base_v <= 0:
            raise ValueError("base_v must be positive")
        if self.drift < 0:
            raise ValueError("drift intensity must be non-negative")
        object.__setattr__(self, "sigma_tones", tuple(tuple(map(float, t)) for t in self.sigma_tones))
        object.__setattr__(self, "phi_tones", tuple(tuple(map(float, t)) for t in self.phi_tones))
        if sum(abs(a) for a, _, _ in self.sigma_tones) >= 0.2:
            raise ValueError("sigma modulation must stay below 0.2 in amplitude")

    def shifted(self, angle: float) -> "SlackProfile":
        return replace(self, phi0=self.phi0 + angle)


def multisine(n_tones: int, w_min: float, w_max: float, amplitude: float) -> tuple:
    """Log-spaced tones with Schroeder phases; total peak amplitude ``amplitude``."""
    w = np.geomspace(w_min, w_max, n_tones)
    k = np.arange(1, n_tones + 1)
    ph = -np.pi * k * (k - 1) / n_tones
    return tuple((amplitude / n_tones, wi / (2 * np.pi), pi) for wi, pi in zip(w, ph))


class SlackSignal:
    """Slack complex phase and complex frequency evaluable at arbitrary times."""

    def __init__(self, profile: SlackProfile, seed: int | None, t_end: float, dt: float):
        self.profile = profile
        self.dt = dt
        n = int(math.ceil(t_end / dt)) + 2
        self._t = np.arange(n) * dt
        if profile.drift > 0:
            rng = np.random.default_rng(seed)
            steps = rng.standard_normal(n - 1) * profile.drift * math.sqrt(dt)
            self._w = np.concatenate([[0.0], np.cumsum(steps)])
        else:
            self._w = np.zeros(n)
        # exact integral of the piecewise-linear frequency walk
        self._phi = np.concatenate([[0.0], np.cumsum(0.5 * dt * (self._w[1:] + self._w[:-1]))])

    def _drift(self, t):
        k = np.clip((t / self.dt).astype(int), 0, self._t.size - 2)
        tau = t - self._t[k]
        slope = (self._w[k + 1] - self._w[k]) / self.dt
        w = self._w[k] + slope * tau
        phi = self._phi[k] + self._w[k] * tau + 0.5 * slope * tau**2
        return phi, w

    def evaluate(self, t):
        """``(sigma, phi, rho, omega)`` arrays at times ``t``."""
        t = np.asarray(t, dtype=float)
        p = self.profile
        sigma = np.full(t.shape, math.log(p.base_v))
        rho = np.zeros(t.shape)
        phi = p.base_omega * t + p.phi0
        omega = np.full(t.shape, p.base_omega)
        for a, f, ph in p.sigma_tones:
            w = 2 * np.pi * f
            sigma = sigma + a * np.sin(w * t + ph)
            rho = rho + a * w * np.cos(w * t + ph)
        for a, f, ph in p.phi_tones:
            w = 2 * np.pi * f
            phi = phi + a * np.sin(w * t + ph)
            omega = omega + a * w * np.cos(w * t + ph)
        if p.drift > 0:
            dphi, dw = self._drift(t)
            phi = phi + dphi
            omega = omega + dw
        return sigma, phi, rho, omega


def generate_slack_profile(p: SlackProfile, seed: int | None, t_end: float, dt: float):
    """Sampled slack complex phase on ``t = 0, dt, ..., t_end``."""
    n = int(round(t_end / dt)) + 1
    t = np.arange(n) * dt
    sigma, phi, _, _ = SlackSignal(p, seed, t_end, dt).evaluate(t)
    return t, ComplexPhase(sigma, phi)


@dataclass(eq=False)
class Scenario:
    """Everything :func:`simulate` needs.

    ``devices`` maps device buses to :class:`NormalFormParams` or
    :class:`NonlinearDevice`; ``slacks`` maps slack buses to profiles; the
    remaining buses are passive (their load is a shunt in ``network``).
    ``initial`` holds the starting complex phase of every bus; device states
    start at ``x_c = 0`` unless ``initial_x`` says otherwise.
    """

    network: Network
    devices: Mapping[int, NormalFormParams | NonlinearDevice]
    initial: OperatingPoint
    slacks: Mapping[int, SlackProfile] = field(default_factory=dict)
    events: Sequence[GridEvent] = ()
    t_end: float = 10.0
    dt: float = 1e-3
    omega_nom: float = 0.0
    seed: int | None = 0
    noise: float = 0.0
    frame_omega: float | None = None
    initial_x: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.dt > 0 or not self.t_end > 0:
            raise ValueError("dt and t_end must be positive")
        overlap = set(self.devices) & set(self.slacks)
        if overlap:
            raise ValueError(f"buses {sorted(overlap)} are both device and slack")
        for b in list(self.devices) + list(self.slacks):
            if not 0 <= b < self.network.n_bus:
                raise IndexError(f"bus {b} outside network")
        for ev in self.events:
            if ev.time > self.t_end:
                raise ValueError(f"event at t={ev.time} is beyond t_end={self.t_end}")

    @property
    def source_buses(self) -> list[int]:
        return sorted(set(self.devices) | set(self.slacks))

    @property
    def load_buses(self) -> list[int]:
        return [b for b in range(self.network.n_bus) if b not in self.devices and b not in self.slacks]

    def with_device(self, bus: int, device) -> "Scenario":
        devices = dict(self.devices)
        devices[bus] = device
        return replace(self, devices=devices)


def scenario_from_power_flow(
    network: Network,
    pf_spec: Sequence[PQ | PV | Slack],
    devices: Mapping[int, NormalFormParams | NonlinearDevice],
    slacks: Mapping[int, SlackProfile] | None = None,
    **kwargs,
) -> Scenario:
    """Solve the power flow and build a scenario starting at that equilibrium.

    Device set-points are replaced by the solved ``(P, Q, V)`` so every device
    starts with ``e = 0``; passive buses get a constant-impedance shunt that
    draws their scheduled load at the solved voltage.
    """
    slacks = dict(slacks or {})
    op = solve_power_flow(network, pf_spec)
    new_devices = {}
    for b, dev in devices.items():
        sp = Setpoints(float(op.p[b]), float(op.q[b]), float(op.v_mag[b]))
        new_devices[b] = dev.with_setpoints(sp) if isinstance(dev, NormalFormParams) else replace(dev, setpoints=sp)
    shunts = list(network.shunts)
    for b in range(network.n_bus):
        if b in devices or b in slacks:
            continue
        spec = pf_spec[b]
        if not isinstance(spec, PQ):
            raise ValueError(f"passive bus {b} must be a PQ bus in the power flow")
        # injected S = -(load); shunt consumption V^2 conj(y) equals the load
        shunts[b] = shunts[b] + complex(-spec.p, spec.q) / op.v_mag[b] ** 2
    kinds = tuple("device" if b in devices else "slack" if b in slacks else "load" for b in range(network.n_bus))
    net = Network(network.n_bus, network.lines, tuple(shunts), kinds)
    for b, prof in slacks.items():
        if abs(math.log(prof.base_v) - op.sigma[b]) > 1e-9 or abs(prof.phi0 - op.phi[b]) > 1e-9:
            raise ValueError(f"slack profile at bus {b} does not match the power-flow slack voltage")
    return Scenario(network=net, devices=new_devices, initial=op, slacks=slacks, **kwargs)


@dataclass(eq=False)
class Trajectory:
    """Recorded simulation output; 2-D arrays are ``(n_samples, n_bus)``."""

    t: np.ndarray
    v: np.ndarray
    i: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray
    rho: np.ndarray
    omega: np.ndarray
    p: np.ndarray
    q: np.ndarray
    x: dict = field(default_factory=dict)
    omega_nom: float = 0.0
    frame_omega: float = 0.0
    frame_phi0: float = 0.0

    @property
    def n_bus(self) -> int:
        return self.v.shape[1]

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def dq(self, frame_omega: float | None = None, frame_phi0: float | None = None) -> np.ndarray:
        fo = self.frame_omega if frame_omega is None else frame_omega
        f0 = self.frame_phi0 if frame_phi0 is None else frame_phi0
        return project_dq(self, fo, f0)

    def channel(self, name: str) -> np.ndarray:
        if name == "v_alpha":
            return self.v.real
        if name == "v_beta":
            return self.v.imag
        if name in ("v_d", "v_q"):
            vdq = self.dq()
            return vdq.real if name == "v_d" else vdq.imag
        if name in ("sigma", "phi", "rho", "omega", "p", "q"):
            return getattr(self, name)
        raise KeyError(name)

    def to_csv(self, path, channels: Sequence[str] = CHANNELS, buses: Sequence[int] | None = None) -> None:
        buses = range(self.n_bus) if buses is None else buses
        cols = [("t", self.t)]
        data = {c: self.channel(c) for c in channels}
        for b in buses:
            for c in channels:
                cols.append((f"bus{b}_{c}", data[c][:, b]))
        table = np.column_stack([c[1] for c in cols])
        np.savetxt(path, table, fmt="%.17g", delimiter=",", header=",".join(c[0] for c in cols), comments="")


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    """Columns of a trajectory CSV keyed by header name."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if not header or header[0] != "t":
        raise ValueError(f"{path}: first column must be 't'")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[1] != len(header):
        raise ValueError(f"malformed trajectory CSV {path}")
    return {h: rows[:, k] for k, h in enumerate(header)}


def project_dq(traj: Trajectory, frame_omega: float, frame_phi0: float = 0.0) -> np.ndarray:
    """dq voltages (complex ``v_d + j v_q``) of every bus in a rotating frame."""
    return park(traj.v, (frame_omega * traj.t + frame_phi0)[:, None])


class _Devices:
    """Batched evaluation of the device set (H-W blocks plus callbacks)."""

    def __init__(self, devices: Mapping[int, object], buses: list[int]):
        self.buses = buses
        self.sizes = [devices[b].n_x for b in buses]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        nx = int(self.offsets[-1])
        nd = len(buses)
        self.hw = [k for k, b in enumerate(buses) if isinstance(devices[b], NormalFormParams)]
        self.other = [(k, devices[b]) for k, b in enumerate(buses) if not isinstance(devices[b], NormalFormParams)]
        self.A = np.zeros((nx, nx))
        self.B = np.zeros((nx, 3 * nd))
        self.C = np.zeros((2 * nd, nx))
        self.D = np.zeros((2 * nd, 3 * nd))
        for k in self.hw:
            prm = devices[buses[k]]
            sl = slice(self.offsets[k], self.offsets[k + 1])
            self.A[sl, sl] = prm.A
            self.B[sl, 3 * k : 3 * k + 3] = prm.B
            self.C[2 * k : 2 * k + 2, sl] = prm.C
            self.D[2 * k : 2 * k + 2, 3 * k : 3 * k + 3] = prm.D
        sps = [devices[b].setpoints for b in buses]
        self.p_set = np.array([s.p_set for s in sps])
        self.q_set = np.array([s.q_set for s in sps])
        self.v_set = np.array([s.v_set for s in sps])
        self.nx = nx

    def evaluate(self, x, e):
        """``x`` is ``(..., nx)``, ``e`` is ``(..., nd, 3)``; returns ``(xdot, eta)``."""
        ef = e.reshape(e.shape[:-2] + (-1,))
        xdot = x @ self.A.T + ef @ self.B.T
        eta = (x @ self.C.T + ef @ self.D.T).reshape(e.shape[:-2] + (-1, 2))
        for k, dev in self.other:
            sl = slice(self.offsets[k], self.offsets[k + 1])
            if x.ndim == 1:
                xd, et = dev.derivatives(x[sl], e[k])
                xdot[sl] = xd
                eta[k] = et
            else:
                for j in range(x.shape[0]):
                    xd, et = dev.derivatives(x[j, sl], e[j, k])
                    xdot[j, sl] = xd
                    eta[j, k] = et
        return xdot, eta


def simulate(sc: Scenario) -> Trajectory:
    """Integrate a scenario with fixed-step RK4 and record every step."""
    net = sc.network
    dev_buses = sorted(sc.devices)
    slack_buses = sorted(sc.slacks)
    src = sc.source_buses
    loads = sc.load_buses
    nd = len(dev_buses)
    dt = sc.dt
    n_steps = int(round(sc.t_end / dt))
    t = np.arange(n_steps + 1) * dt

    devs = _Devices(sc.devices, dev_buses)
    dev_pos = [src.index(b) for b in dev_buses]
    slack_pos = [src.index(b) for b in slack_buses]

    # slack voltages on the half-step grid
    th = np.arange(2 * n_steps + 1) * (dt / 2)
    slack_sig = {}
    slack_v = np.zeros((th.size, len(slack_buses)), dtype=complex)
    for k, b in enumerate(slack_buses):
        sig = SlackSignal(sc.slacks[b], None if sc.seed is None else sc.seed + 7919 * b, sc.t_end, dt)
        slack_sig[b] = sig
        s_, f_, _, _ = sig.evaluate(th)
        slack_v[:, k] = np.exp(s_ + 1j * f_)

    # network segments between events (snapped to the step grid)
    events = sorted(sc.events, key=lambda e: e.time)
    ev_steps = [int(round(ev.time / dt)) for ev in events]
    nets = [net]
    for ev in events:
        nets.append(apply_event(nets[-1], ev))
    seg_start = [0] + ev_steps

    def seg_index(k):
        j = 0
        while j + 1 < len(seg_start) and seg_start[j + 1] <= k:
            j += 1
        return j

    reduced = [kron_reduce(n_.y, src) for n_ in nets]

    op = sc.initial
    x0 = np.zeros(devs.nx)
    for k, b in enumerate(dev_buses):
        if b in sc.initial_x:
            x0[devs.offsets[k] : devs.offsets[k + 1]] = np.asarray(sc.initial_x[b], dtype=float)
    state = np.concatenate([x0, op.sigma[dev_buses], op.phi[dev_buses]])
    nx = devs.nx

    def rhs(y_state, yred, vslack):
        x = y_state[:nx]
        sig = y_state[nx : nx + nd]
        ph = y_state[nx + nd :]
        vd = np.exp(sig + 1j * ph)
        vs = np.empty(len(src), dtype=complex)
        vs[dev_pos] = vd
        vs[slack_pos] = vslack
        cur = yred[dev_pos] @ vs
        s = vd * np.conj(cur)
        e = np.stack([s.real - devs.p_set, s.imag - devs.q_set, np.exp(sig) - devs.v_set], axis=-1)
        xdot, eta = devs.evaluate(x, e)
        return np.concatenate([xdot, eta[:, 0], eta[:, 1] + sc.omega_nom])

    states = np.empty((n_steps + 1, state.size))
    states[0] = state
    for k in range(n_steps):
        yred = reduced[seg_index(k)]
        v0, vh, v1 = slack_v[2 * k], slack_v[2 * k + 1], slack_v[2 * k + 2]
        k1 = rhs(state, yred, v0)
        k2 = rhs(state + 0.5 * dt * k1, yred, vh)
        k3 = rhs(state + 0.5 * dt * k2, yred, vh)
        k4 = rhs(state + dt * k3, yred, v1)
        state = state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(state)) or np.any(state[nx : nx + nd] < math.log(MIN_VOLTAGE)):
            raise SimulationError(f"voltage collapse or non-finite state at t = {t[k + 1]:.6g} s")
        states[k + 1] = state

    return _record(sc, t, states, devs, dev_buses, slack_buses, loads, src, nets, seg_start, slack_sig)


def _record(sc, t, states, devs, dev_buses, slack_buses, loads, src, nets, seg_start, slack_sig) -> Trajectory:
    nb = sc.network.n_bus
    nd = len(dev_buses)
    nx = devs.nx
    n = t.size
    v = np.zeros((n, nb), dtype=complex)
    sigma = np.zeros((n, nb))
    phi = np.zeros((n, nb))
    rho = np.zeros((n, nb))
    omega = np.zeros((n, nb))
    x = states[:, :nx]
    sigma[:, dev_buses] = states[:, nx : nx + nd]
    phi[:, dev_buses] = states[:, nx + nd :]
    v[:, dev_buses] = np.exp(sigma[:, dev_buses] + 1j * phi[:, dev_buses])
    for b in slack_buses:
        s_, f_, r_, w_ = slack_sig[b].evaluate(t)
        sigma[:, b], phi[:, b], rho[:, b], omega[:, b] = s_, f_, r_, w_
        v[:, b] = np.exp(s_ + 1j * f_)

    cur = np.zeros((n, nb), dtype=complex)
    bounds = list(seg_start) + [n]
    for j, net in enumerate(nets):
        lo, hi = bounds[j], bounds[j + 1]
        if hi <= lo:
            continue
        if loads:
            v[lo:hi, loads] = passive_voltages(net.y, src, v[lo:hi, src].T).T
        y_rec = net.y.copy()
        for b in loads:
            y_rec[b, b] -= net.shunts[b]
        cur[lo:hi] = v[lo:hi] @ y_rec.T

    rng = np.random.default_rng(None if sc.seed is None else sc.seed + 1)
    if sc.noise > 0:
        for arr in (v, cur):
            scale = sc.noise * np.sqrt(np.mean(np.abs(arr) ** 2, axis=0))
            arr += scale * (rng.standard_normal(arr.shape) + 1j * rng.standard_normal(arr.shape)) / np.sqrt(2)

    s = v * np.conj(cur)
    # device outputs use the noise-free electrical quantities
    s_true = _true_power(sc, states, devs, dev_buses, slack_buses, src, nets, seg_start, slack_sig, t)
    e_true = np.stack(
        [s_true.real - devs.p_set, s_true.imag - devs.q_set, np.exp(states[:, nx : nx + nd]) - devs.v_set], axis=-1
    )
    _, eta = devs.evaluate(x, e_true)
    rho[:, dev_buses] = eta[..., 0]
    omega[:, dev_buses] = eta[..., 1] + sc.omega_nom

    if loads and n >= 3:
        sigma[:, loads], phi[:, loads] = unwrap_phase_columns(v[:, loads])
        rho[:, loads] = np.gradient(sigma[:, loads], t, axis=0, edge_order=2)
        omega[:, loads] = np.gradient(phi[:, loads], t, axis=0, edge_order=2)
    if sc.noise > 0:
        # relative to the RMS of the deviation from the nominal frequency
        for arr, ref in ((rho, 0.0), (omega, sc.omega_nom)):
            scale = sc.noise * np.sqrt(np.mean((arr - ref) ** 2, axis=0))
            arr += scale * rng.standard_normal(arr.shape)
        sigma, phi = unwrap_phase_columns(v)

    frame = sc.omega_nom if sc.frame_omega is None else sc.frame_omega
    xd = {b: x[:, devs.offsets[k] : devs.offsets[k + 1]].copy() for k, b in enumerate(dev_buses)}
    return Trajectory(t, v, cur, sigma, phi, rho, omega, s.real, s.imag, xd, sc.omega_nom, frame, 0.0)


def _true_power(sc, states, devs, dev_buses, slack_buses, src, nets, seg_start, slack_sig, t):
    nx = devs.nx
    nd = len(dev_buses)
    n = t.size
    vs = np.zeros((n, len(src)), dtype=complex)
    pos = {b: k for k, b in enumerate(src)}
    vs[:, [pos[b] for b in dev_buses]] = np.exp(states[:, nx : nx + nd] + 1j * states[:, nx + nd :])
    for b in slack_buses:
        s_, f_, _, _ = slack_sig[b].evaluate(t)
        vs[:, pos[b]] = np.exp(s_ + 1j * f_)
    out = np.zeros((n, nd), dtype=complex)
    bounds = list(seg_start) + [n]
    dp = [pos[b] for b in dev_buses]
    for j, net in enumerate(nets):
        lo, hi = bounds[j], bounds[j + 1]
        if hi <= lo:
            continue
        yred = kron_reduce(net.y, src)
        out[lo:hi] = vs[lo:hi, dp] * np.conj(vs[lo:hi] @ yred[dp].T)
    return out


def unwrap_phase_columns(v: np.ndarray):
    sig = np.log(np.abs(v))
    ph = np.unwrap(np.angle(v), axis=0)
    return sig, ph


def islanding_scenario(
    params_main: Sequence[NormalFormParams],
    load: complex | tuple = (1.0, 0.2),
    aux_grid: SlackProfile | None = None,
    t_island: float = 4.5,
    t_end: float = 10.0,
    dt: float = 1e-3,
    b_line: float = 10.0,
    b_aux: float = 10.0,
    omega_nom: float = 2 * np.pi * 50,
    seed: int | None = 0,
    noise: float = 0.0,
) -> Scenario:
    """Two inverters and a load fed partly by an auxiliary grid that is cut off.

    Buses: 0 and 1 inverters, 2 load, 3 auxiliary slack.  The inverters are
    scheduled at their ``p_set``/``q_set``; the auxiliary grid covers the rest
    of the load until ``remove_line(2, 3)`` at ``t_island``.
    """
    if len(params_main) != 2:
        raise ValueError("islanding scenario needs exactly two inverter devices")
    if t_island > t_end:
        raise ValueError(f"t_island={t_island} is beyond t_end={t_end}")
    pl, ql = (load.real, load.imag) if isinstance(load, complex) else load
    aux = aux_grid or SlackProfile(base_omega=omega_nom)
    net = Network(
        4,
        {(0, 2): complex(0, -b_line), (1, 2): complex(0, -b_line), (2, 3): complex(0, -b_aux)},
    )
    spec = [
        PQ(params_main[0].setpoints.p_set, params_main[0].setpoints.q_set),
        PQ(params_main[1].setpoints.p_set, params_main[1].setpoints.q_set),
        PQ(-pl, -ql),
        Slack(aux.base_v, aux.phi0),
    ]
    return scenario_from_power_flow(
        net,
        spec,
        {0: params_main[0], 1: params_main[1]},
        {3: aux},
        events=(GridEvent(t_island, "remove_line", (2, 3)),),
        t_end=t_end,
        dt=dt,
        omega_nom=omega_nom,
        seed=seed,
        noise=noise,
    )
