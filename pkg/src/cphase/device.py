"""Grid-forming device models in normal form.

A device maps error coordinates ``e = [P - P_set, Q - Q_set, V - V_set]`` to a
complex frequency ``eta = [rho, omega]`` through internal states ``x_c``.  In
the Hammerstein-Wiener (H-W) case the map is linear::

    x_c' = A x_c + B e
    eta  = C x_c + D e

``omega`` is always the deviation from the nominal frequency; the nominal
frequency itself belongs to the scenario.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .coords import ComplexFrequency, apparent_power, as_complex, as_vector

#: resonance guard for transfer-matrix evaluation
RESONANCE_TOL = 1e-12


class ResonanceError(ArithmeticError):
    """``s`` sits on an eigenvalue of ``A``."""


@dataclass(frozen=True)
class Setpoints:
    p_set: float = 0.0
    q_set: float = 0.0
    v_set: float = 1.0

    def __post_init__(self):
        if not self.v_set > 0:
            raise ValueError(f"v_set must be positive, got {self.v_set}")


def error_coords(v, i, sp: Setpoints) -> np.ndarray:
    """``[P - P_set, Q - Q_set, |v| - V_set]`` along the last axis."""
    z = as_complex(v)
    if np.any(np.abs(z) <= 0):
        raise ValueError("error coordinates are undefined at zero voltage")
    p, q = apparent_power(v, i)
    return np.stack(
        np.broadcast_arrays(np.asarray(p) - sp.p_set, np.asarray(q) - sp.q_set, np.abs(z) - sp.v_set),
        axis=-1,
    )


def _proportional_columns(B: np.ndarray, D: np.ndarray, rtol: float = 1e-10):
    """Ratio r with column_v == r * column_q in both B and D, or None."""
    cq = np.concatenate([B[:, 1], D[:, 1]])
    cv = np.concatenate([B[:, 2], D[:, 2]])
    nq = float(cq @ cq)
    if nq == 0.0:
        return None
    r = float(cq @ cv) / nq
    if np.linalg.norm(cv - r * cq) > rtol * max(np.linalg.norm(cv), np.linalg.norm(cq)):
        return None
    return r


@dataclass(frozen=True, eq=False)
class NormalFormParams:
    """Matrices of an H-W normal-form device.

    Output rows are ``[rho, omega]``, input columns ``[e_p, e_q, e_v]``.
    ``vq_droop`` declares that the ``e_v`` column is a real multiple of the
    ``e_q`` column, which is what the stability certificate needs.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    setpoints: Setpoints = field(default_factory=Setpoints)
    vq_droop: bool = False

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float)) if np.size(self.A) else np.zeros((0, 0))
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n, 3)
        C = np.asarray(self.C, dtype=float).reshape(2, n)
        D = np.asarray(self.D, dtype=float).reshape(2, 3)
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        for name, arr in (("A", A), ("B", B), ("C", C), ("D", D)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.vq_droop and _proportional_columns(B, D) is None:
            raise ValueError("vq_droop set but the e_v column is not proportional to the e_q column")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    def derivatives(self, x_c, e):
        return hw_derivatives(self, x_c, e)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
            "p_set": self.setpoints.p_set,
            "q_set": self.setpoints.q_set,
            "v_set": self.setpoints.v_set,
            "vq_droop": self.vq_droop,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalFormParams":
        n = len(d["A"])
        return cls(
            A=np.array(d["A"], dtype=float).reshape(n, n),
            B=np.array(d["B"], dtype=float).reshape(n, 3),
            C=np.array(d["C"], dtype=float).reshape(2, n),
            D=np.array(d["D"], dtype=float).reshape(2, 3),
            setpoints=Setpoints(d.get("p_set", 0.0), d.get("q_set", 0.0), d.get("v_set", 1.0)),
            vq_droop=bool(d.get("vq_droop", False)),
        )

    def with_setpoints(self, sp: Setpoints) -> "NormalFormParams":
        return NormalFormParams(self.A, self.B, self.C, self.D, sp, self.vq_droop)


def hw_derivatives(params: NormalFormParams, x_c, e):
    """Evaluate the linear subsystem: returns ``(x_c_dot, eta)``."""
    x_c = np.asarray(x_c, dtype=float).reshape(-1)
    e = np.asarray(e, dtype=float).reshape(-1)
    if x_c.size != params.n_x or e.size != 3:
        raise ValueError(f"expected x_c of size {params.n_x} and e of size 3, got {x_c.size} and {e.size}")
    xdot = params.A @ x_c + params.B @ e
    eta = params.C @ x_c + params.D @ e
    return xdot, ComplexFrequency(float(eta[0]), float(eta[1]))


@dataclass
class NonlinearDevice:
    """General normal form ``x_c' = g(e, x_c)``, ``eta = f(e, x_c)``.

    ``rhs(x_c, e)`` must return ``(x_c_dot, eta)`` with ``eta`` a length-2
    array ``[rho, omega]``.
    """

    rhs: Callable[[np.ndarray, np.ndarray], tuple]
    n_x: int
    setpoints: Setpoints = field(default_factory=Setpoints)

    def derivatives(self, x_c, e):
        xdot, eta = self.rhs(np.asarray(x_c, dtype=float), np.asarray(e, dtype=float))
        eta = np.asarray(eta, dtype=float)
        return np.asarray(xdot, dtype=float).reshape(self.n_x), ComplexFrequency(float(eta[0]), float(eta[1]))


def droop_params(
    k_p: float,
    k_q: float,
    tau_p: float,
    tau_q: float | None,
    sp: Setpoints,
    alpha: float = 1.0,
    n_x: int = 2,
    crosstalk: tuple = (0.0, 0.0),
) -> NormalFormParams:
    """Low-pass filtered P-omega / Q-V droop as an H-W normal form.

    ``omega = -k_p * LPF(e_p)`` and ``rho = -k_q * LPF(e_q + alpha * e_v)``.
    ``n_x`` selects how many of the two channels carry a first-order filter:
    2 filters both, 1 filters only the active-power channel and 0 gives the
    stateless droop ``eta = D e``.  ``crosstalk = (c_rp, c_wq)`` adds
    ``c_rp * LPF(e_p)`` to ``rho`` and ``c_wq * LPF(e_q + alpha * e_v)`` to
    ``omega``; the V-Q droop structure is kept.
    """
    c_rp, c_wq = map(float, crosstalk)
    if k_p <= 0 or k_q <= 0:
        raise ValueError("droop gains must be positive")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if n_x not in (0, 1, 2):
        raise ValueError("droop_params supports n_x in {0, 1, 2}")
    if n_x >= 1 and not tau_p > 0:
        raise ValueError("tau_p must be positive")
    if n_x == 2 and not (tau_q is not None and tau_q > 0):
        raise ValueError("tau_q must be positive")

    q_row = np.array([0.0, 1.0, alpha])
    if n_x == 0:
        A = np.zeros((0, 0))
        B = np.zeros((0, 3))
        C = np.zeros((2, 0))
        D = np.vstack([-k_q * q_row + [c_rp, 0.0, 0.0], c_wq * q_row + [-k_p, 0.0, 0.0]])
    elif n_x == 1:
        A = np.array([[-1.0 / tau_p]])
        B = np.array([[1.0 / tau_p, 0.0, 0.0]])
        C = np.array([[c_rp], [-k_p]])
        D = np.vstack([-k_q * q_row, c_wq * q_row])
    else:
        A = np.diag([-1.0 / tau_p, -1.0 / tau_q])
        B = np.vstack([[1.0 / tau_p, 0.0, 0.0], q_row / tau_q])
        C = np.array([[c_rp, -k_q], [-k_p, c_wq]])
        D = np.zeros((2, 3))
    return NormalFormParams(A, B, C, D, sp, vq_droop=True)


def device_transfer_matrix(params: NormalFormParams, s) -> np.ndarray:
    """``T(s) = C (sI - A)^-1 B + D``; shape ``(2, 3)`` or ``(len(s), 2, 3)``."""
    s_arr = np.atleast_1d(np.asarray(s, dtype=complex))
    n = params.n_x
    if n == 0:
        out = np.broadcast_to(params.D.astype(complex), (s_arr.size, 2, 3)).copy()
    else:
        lam = np.linalg.eigvals(params.A)
        gap = np.min(np.abs(s_arr[:, None] - lam[None, :]), axis=1)
        if np.any(gap < RESONANCE_TOL):
            bad = s_arr[np.argmin(gap)]
            raise ResonanceError(f"s = {bad} coincides with an eigenvalue of A")
        M = s_arr[:, None, None] * np.eye(n) - params.A
        X = np.linalg.solve(M, np.broadcast_to(params.B, (s_arr.size, n, 3)))
        out = params.C @ X + params.D
    return out[0] if np.ndim(s) == 0 else out


def vq_droop_coefficient(params: NormalFormParams, v_op: float, seed: int = 0) -> float:
    """Scalar ``alpha_tilde`` in ``eta = T_.Q (dQ + alpha_tilde dsigma) + T_.P dP``.

    With ``T_.V = r T_.Q`` and ``dV = V_op dsigma`` this is ``r * V_op``.  The
    proportionality is checked on 8 random Laplace frequencies.
    """
    if not params.vq_droop:
        raise ValueError("device is not flagged as V-Q droop")
    if v_op <= 0:
        raise ValueError("v_op must be positive")
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.05, 5.0, 8) * np.exp(1j * rng.uniform(-np.pi / 2, np.pi / 2, 8))
    if params.n_x:
        lam = np.linalg.eigvals(params.A)
        s = s[np.min(np.abs(s[:, None] - lam[None, :]), axis=1) > 1e-6]
    T = device_transfer_matrix(params, s)
    tq = T[:, :, 1].ravel()
    tv = T[:, :, 2].ravel()
    nq = np.vdot(tq, tq).real
    if nq == 0.0:
        raise ValueError("device has no reactive-power response; V-Q droop undefined")
    r = np.vdot(tq, tv) / nq
    scale = max(np.linalg.norm(tv), np.linalg.norm(tq))
    if abs(r.imag) > 1e-10 * max(1.0, abs(r)) or np.linalg.norm(tv - r.real * tq) > 1e-10 * scale:
        raise ValueError("transfer matrix violates the V-Q droop proportionality")
    return float(r.real) * v_op


class DroopVoltageSource:
    """Stateless droop device written as alpha-beta voltage dynamics ``v' = f(v, i)``.

    ``f`` rotates at ``omega_nom`` plus the droop deviation, so ``v`` and ``i``
    are stationary-frame vectors.  ``eta`` gives the deviation form of the
    complex frequency as a function of ``(sigma, phi, P, Q)``; it passes through
    the voltage and current vectors, so ``phi`` enters the computation.
    """

    def __init__(self, params: NormalFormParams, omega_nom: float = 0.0):
        if params.n_x != 0:
            raise ValueError("DroopVoltageSource needs a stateless (n_x = 0) device")
        self.params = params
        self.omega_nom = float(omega_nom)

    def _eta_complex(self, v, i):
        e = error_coords(v, i, self.params.setpoints)
        rho, omega = self.params.D @ e
        return rho + 1j * omega

    def f(self, v, i) -> np.ndarray:
        zv = as_complex(v)
        eta = self._eta_complex(v, i) + 1j * self.omega_nom
        return as_vector(zv * eta)

    def eta(self, sigma, phi, p, q) -> np.ndarray:
        v = np.exp(sigma + 1j * phi)
        i = np.conj((p + 1j * q) / v)
        z = self._eta_complex(v, i)
        return np.array([z.real, z.imag])
