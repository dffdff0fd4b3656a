"""Admittance Laplacian, nodal power, Newton-Raphson power flow and grid events.

Currents injected into the network are ``i = Y v``.  A line with series
admittance ``y_l`` contributes ``+y_l`` to both diagonal entries and ``-y_l`` to
the two off-diagonal ones, so a lossless line of susceptance ``b`` gives
``Y_nm = +1j b`` and ``Y_nn = -1j b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .coords import PowerPair

BUS_KINDS = ("device", "slack", "load")


class PowerFlowError(RuntimeError):
    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def _key(n: int, m: int) -> tuple[int, int]:
    return (n, m) if n < m else (m, n)


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable bus/line description; ``y`` is derived from lines and shunts."""

    n_bus: int
    lines: dict = field(default_factory=dict)  # (n, m) -> complex series admittance
    shunts: tuple = ()
    bus_kinds: tuple = ()

    def __post_init__(self):
        shunts = tuple(complex(s) for s in self.shunts) or (0j,) * self.n_bus
        if len(shunts) != self.n_bus:
            raise ValueError("one shunt entry per bus required")
        kinds = tuple(self.bus_kinds) or ("device",) * self.n_bus
        if len(kinds) != self.n_bus or any(k not in BUS_KINDS for k in kinds):
            raise ValueError(f"bus_kinds must list one of {BUS_KINDS} per bus")
        object.__setattr__(self, "shunts", shunts)
        object.__setattr__(self, "bus_kinds", kinds)
        object.__setattr__(self, "lines", dict(self.lines))
        y = np.zeros((self.n_bus, self.n_bus), dtype=complex)
        for (n, m), yl in self.lines.items():
            if not (0 <= n < self.n_bus and 0 <= m < self.n_bus) or n == m:
                raise IndexError(f"invalid line ({n}, {m}) for {self.n_bus} buses")
            y[n, n] += yl
            y[m, m] += yl
            y[n, m] -= yl
            y[m, n] -= yl
        y[np.diag_indices(self.n_bus)] += np.array(shunts)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def lossless(self) -> bool:
        return bool(np.all(self.y.real == 0.0))

    @property
    def lines_lossless(self) -> bool:
        """No series conductance (shunt loads may still be resistive)."""
        return all(y.real == 0.0 for y in self.lines.values())

    def neighbours(self):
        """Pairs ``(n, m)`` joined by a line."""
        return sorted(self.lines)

    def is_connected(self, buses: Sequence[int] | None = None) -> bool:
        adj = np.zeros((self.n_bus, self.n_bus))
        for n, m in self.lines:
            adj[n, m] = adj[m, n] = 1.0
        if buses is not None:
            adj = adj[np.ix_(buses, buses)]
        if adj.shape[0] <= 1:
            return True
        return connected_components(adj, directed=False)[0] == 1


def build_admittance(
    lines: Iterable[Sequence[float]],
    shunts: Iterable[tuple[int, complex]] = (),
    n_bus: int | None = None,
    bus_kinds: Sequence[str] = (),
) -> Network:
    """Network from ``(n, m, b)`` or ``(n, m, b, g)`` line tuples.

    ``b`` is the series susceptance magnitude (inductive lines have
    ``b > 0``), ``g`` an optional series conductance.  Repeated lines between
    the same pair are merged by adding their admittances.
    """
    lines = [tuple(l) for l in lines]
    shunts = list(shunts)
    if n_bus is None:
        idx = [i for l in lines for i in l[:2]] + [s[0] for s in shunts]
        n_bus = max(len(bus_kinds), (max(idx) + 1) if idx else 0)
    merged: dict = {}
    for line in lines:
        n, m, b = int(line[0]), int(line[1]), float(line[2])
        g = float(line[3]) if len(line) > 3 else 0.0
        if not (0 <= n < n_bus and 0 <= m < n_bus) or n == m:
            raise IndexError(f"invalid line ({n}, {m}) for {n_bus} buses")
        k = _key(n, m)
        merged[k] = merged.get(k, 0j) + complex(g, -b)
    sh = np.zeros(n_bus, dtype=complex)
    for n, ysh in shunts:
        if not 0 <= n < n_bus:
            raise IndexError(f"invalid shunt bus {n}")
        sh[n] += complex(ysh)
    return Network(n_bus, merged, tuple(sh), tuple(bus_kinds))


def nodal_currents(net: Network, v) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    if v.shape[-1] != net.n_bus:
        raise ValueError(f"expected {net.n_bus} bus voltages, got {v.shape[-1]}")
    return v @ net.y.T


def nodal_power(net: Network, v) -> PowerPair:
    v = np.asarray(v, dtype=complex)
    s = v * np.conj(nodal_currents(net, v))
    return PowerPair(s.real, s.imag)


class PQ(NamedTuple):
    p: float
    q: float


class PV(NamedTuple):
    p: float
    v_mag: float


class Slack(NamedTuple):
    v_mag: float = 1.0
    phi: float = 0.0


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    v_mag: np.ndarray
    phi: np.ndarray
    p: np.ndarray
    q: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    @property
    def sigma(self) -> np.ndarray:
        return np.log(self.v_mag)

    @property
    def v(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.phi)

    def rotated(self, angle: float) -> "OperatingPoint":
        return OperatingPoint(self.v_mag, self.phi + angle, self.p, self.q, self.iterations, self.residual)

    @classmethod
    def from_voltages(cls, net: Network, v, iterations=0, residual=0.0) -> "OperatingPoint":
        v = np.asarray(v, dtype=complex)
        p, q = nodal_power(net, v)
        return cls(np.abs(v), np.angle(v), p, q, iterations, residual)


def _dS(net: Network, v: np.ndarray):
    """Complex derivatives of ``S = v conj(Y v)`` w.r.t. sigma and phi."""
    s = v * np.conj(net.y @ v)
    cross = v[:, None] * np.conj(net.y) * np.conj(v)[None, :]
    ds_dsigma = np.diag(s) + cross
    ds_dphi = 1j * np.diag(s) - 1j * cross
    return s, ds_dsigma, ds_dphi


def power_flow_jacobian(net: Network, op: OperatingPoint) -> np.ndarray:
    """``d(P, Q) / d(sigma, phi)``, laid out ``[[P_s, P_f], [Q_s, Q_f]]``."""
    _, dss, dsf = _dS(net, op.v)
    return np.block([[dss.real, dsf.real], [dss.imag, dsf.imag]])


def solve_power_flow(
    net: Network,
    spec: Sequence[PQ | PV | Slack],
    initial_guess: OperatingPoint | None = None,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> OperatingPoint:
    """Newton-Raphson in complex-phase coordinates ``(sigma, phi)``."""
    n = net.n_bus
    if len(spec) != n:
        raise ValueError(f"need one bus specification per bus ({n})")
    slack = [k for k, b in enumerate(spec) if isinstance(b, Slack)]
    if len(slack) != 1:
        raise ValueError("exactly one slack bus required")
    if not net.is_connected():
        raise PowerFlowError("network is not connected")

    pq = [k for k, b in enumerate(spec) if isinstance(b, PQ)]
    pv = [k for k, b in enumerate(spec) if isinstance(b, PV)]
    phi_idx = np.array(sorted(pq + pv), dtype=int)
    sig_idx = np.array(pq, dtype=int)

    if initial_guess is not None:
        sigma = np.log(np.asarray(initial_guess.v_mag, dtype=float)).copy()
        phi = np.asarray(initial_guess.phi, dtype=float).copy()
    else:
        # flat start at the slack angle, otherwise a rotated slack can land on the low-voltage branch
        sigma = np.zeros(n)
        phi = np.full(n, float(spec[slack[0]].phi))
    p_target = np.zeros(n)
    q_target = np.zeros(n)
    for k, b in enumerate(spec):
        if isinstance(b, Slack):
            sigma[k] = np.log(b.v_mag)
            phi[k] = b.phi
        elif isinstance(b, PV):
            sigma[k] = np.log(b.v_mag)
            p_target[k] = b.p
        else:
            p_target[k], q_target[k] = b.p, b.q

    with np.errstate(all="ignore"):
        return _newton(net, sigma, phi, p_target, q_target, phi_idx, sig_idx, tol, max_iter)


def _newton(net, sigma, phi, p_target, q_target, phi_idx, sig_idx, tol, max_iter):
    resid = np.inf
    it = 0
    for it in range(max_iter + 1):
        v = np.exp(sigma + 1j * phi)
        s, dss, dsf = _dS(net, v)
        mis = np.concatenate([s.real[phi_idx] - p_target[phi_idx], s.imag[sig_idx] - q_target[sig_idx]])
        resid = float(np.max(np.abs(mis))) if mis.size else 0.0
        if not np.isfinite(resid):
            break
        if resid < tol:
            return OperatingPoint.from_voltages(net, v, iterations=it, residual=resid)
        if it == max_iter:
            break
        jac = np.block(
            [
                [dss.real[np.ix_(phi_idx, sig_idx)], dsf.real[np.ix_(phi_idx, phi_idx)]],
                [dss.imag[np.ix_(sig_idx, sig_idx)], dsf.imag[np.ix_(sig_idx, phi_idx)]],
            ]
        )
        try:
            step = np.linalg.solve(jac, mis)
        except np.linalg.LinAlgError:
            break
        sigma[sig_idx] -= step[: sig_idx.size]
        phi[phi_idx] -= step[sig_idx.size :]
    raise PowerFlowError(
        f"power flow did not converge (max mismatch {resid:.3e} after {it} iterations)", resid, it
    )


@dataclass(frozen=True)
class GridEvent:
    """A topology or load change at ``time``.

    ``action`` is one of ``remove_line`` (args ``n, m``), ``add_line``
    (``n, m, b[, g]``), ``remove_bus`` (``n``) or ``scale_load`` (``n, factor``).
    """

    time: float
    action: str
    args: tuple = ()

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("event time must be non-negative")
        if self.action not in ("remove_line", "add_line", "remove_bus", "scale_load"):
            raise ValueError(f"unknown event action {self.action!r}")
        object.__setattr__(self, "args", tuple(self.args))


def apply_event(net: Network, ev: GridEvent) -> Network:
    """New network with the event applied; ``net`` is left untouched."""
    lines = dict(net.lines)
    shunts = list(net.shunts)
    if ev.action == "remove_line":
        n, m = (int(a) for a in ev.args[:2])
        if _key(n, m) not in lines:
            raise KeyError(f"no line between {n} and {m}")
        del lines[_key(n, m)]
    elif ev.action == "add_line":
        n, m, b = int(ev.args[0]), int(ev.args[1]), float(ev.args[2])
        g = float(ev.args[3]) if len(ev.args) > 3 else 0.0
        if not (0 <= n < net.n_bus and 0 <= m < net.n_bus) or n == m:
            raise IndexError(f"invalid line ({n}, {m})")
        lines[_key(n, m)] = lines.get(_key(n, m), 0j) + complex(g, -b)
    elif ev.action == "remove_bus":
        n = int(ev.args[0])
        if not 0 <= n < net.n_bus:
            raise IndexError(f"invalid bus {n}")
        lines = {k: y for k, y in lines.items() if n not in k}
        shunts[n] = 0j
    else:
        n, factor = int(ev.args[0]), float(ev.args[1])
        if not 0 <= n < net.n_bus:
            raise IndexError(f"invalid bus {n}")
        if shunts[n] == 0:
            raise ValueError(f"bus {n} has no load shunt to scale")
        shunts[n] *= factor
    return Network(net.n_bus, lines, tuple(shunts), net.bus_kinds)


def kron_reduce(y: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    """Eliminate passive buses (zero injection) from ``i = Y v``."""
    keep = np.asarray(keep, dtype=int)
    drop = np.setdiff1d(np.arange(y.shape[0]), keep)
    if drop.size == 0:
        return y[np.ix_(keep, keep)].copy()
    ykk = y[np.ix_(keep, keep)]
    ykd = y[np.ix_(keep, drop)]
    ydd = y[np.ix_(drop, drop)]
    return ykk - ykd @ np.linalg.solve(ydd, y[np.ix_(drop, keep)])


def passive_voltages(y: np.ndarray, keep: Sequence[int], v_keep: np.ndarray) -> np.ndarray:
    """Voltages of the eliminated buses given those of ``keep``."""
    keep = np.asarray(keep, dtype=int)
    drop = np.setdiff1d(np.arange(y.shape[0]), keep)
    if drop.size == 0:
        return np.zeros((0,) + np.shape(v_keep)[1:], dtype=complex)
    return -np.linalg.solve(y[np.ix_(drop, drop)], y[np.ix_(drop, keep)] @ v_keep)
