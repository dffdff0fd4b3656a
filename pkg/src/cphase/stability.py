"""Per-bus transfer-matrix stability certificate and its eigenvalue cross-check.

Every bus carries a device with transfer matrix ``T(s)`` from ``[P, Q, V]``
errors to ``[rho, omega]`` and an exact V-Q droop ``T_.V V = alpha T_.Q``.
The operating point of a lossless grid is certified stable when, on the
imaginary axis and at ``s = 0``,

* ``Re T_rhoQ < 0`` and ``Re T_omegaP < 0``,
* the diagonal reaction dominates the crosstalk,
  ``Re T_rhoQ Re T_omegaP > |T_rhoP + conj(T_omegaQ)|^2 / 4``,
* and ``alpha >= 2 V^2 |Y_nn| (gamma_max / cos(dphi_max) - 1)``.

The crosstalk inequality can also be evaluated in the reversed
(``as_printed``) direction; both outcomes are always stored.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .device import NormalFormParams, ResonanceError, device_transfer_matrix, vq_droop_coefficient
from .network import Network, OperatingPoint

STRICT_MARGIN = 1e-9
DIRECTIONS = ("text_consistent", "as_printed")
CONDITIONS = ("rhoQ", "omegaP", "crosstalk", "alpha")


class CertificateRefusal(ValueError):
    """The grid or its devices are outside the scope of the certificate."""


class BoundsViolation(ValueError):
    pass


def sample_s_grid(omega_min: float = 1e-3, omega_max: float = 1e5, n: int = 400) -> np.ndarray:
    """``s = j omega`` on a symmetric log grid plus ``s = 0`` (the DC limit).

    Returns ``2 n + 1`` points ordered from ``-j omega_max`` to ``+j omega_max``.
    """
    if not (0 < omega_min < omega_max) or not np.isfinite(omega_max):
        raise ValueError(f"need 0 < omega_min < omega_max, got {omega_min}, {omega_max}")
    if int(n) != n or n < 2:
        raise ValueError(f"need at least 2 points per sign, got {n}")
    w = np.geomspace(omega_min, omega_max, int(n))
    return 1j * np.concatenate([-w[::-1], [0.0], w])


def alpha_bound(v_op: float, y_nn_abs: float, gamma_max: float, dphi_max: float) -> float:
    """``2 V^2 |Y_nn| (gamma_max / cos(dphi_max) - 1)``."""
    return 2.0 * v_op**2 * y_nn_abs * (gamma_max / np.cos(dphi_max) - 1.0)


@dataclass(frozen=True)
class GridBounds:
    gamma_max: float = 1.0
    dphi_max: float = 0.0

    def __post_init__(self):
        if not self.gamma_max >= 1.0:
            raise ValueError(f"gamma_max must be >= 1, got {self.gamma_max}")
        if not 0.0 <= self.dphi_max < np.pi / 2:
            raise ValueError(f"dphi_max must lie in [0, pi/2), got {self.dphi_max}")

    def check(self, net: Network, op: OperatingPoint, tol: float = 1e-12) -> None:
        """Raise :class:`BoundsViolation` naming every line whose end points break the bounds."""
        bad = []
        for n, m in net.lines:
            ratio = op.v_mag[n] / op.v_mag[m]
            dphi = abs(op.phi[n] - op.phi[m])
            if ratio > self.gamma_max + tol or 1.0 / ratio > self.gamma_max + tol:
                bad.append(f"({n}, {m}): voltage ratio {ratio:.6g} outside gamma_max={self.gamma_max:.6g}")
            if dphi > self.dphi_max + tol:
                bad.append(f"({n}, {m}): phase difference {dphi:.6g} exceeds dphi_max={self.dphi_max:.6g}")
        if bad:
            raise BoundsViolation("operating point violates the grid bounds: " + "; ".join(bad))

    @classmethod
    def from_operating_point(cls, net: Network, op: OperatingPoint, slack: float = 1e-6) -> "GridBounds":
        """Tightest bounds that contain the operating point, widened by ``slack``."""
        g, d = 1.0, 0.0
        for n, m in net.lines:
            r = op.v_mag[n] / op.v_mag[m]
            g = max(g, r, 1.0 / r)
            d = max(d, abs(op.phi[n] - op.phi[m]))
        return cls(g * (1 + slack), d + slack)


@dataclass
class BusCertInput:
    t_sampler: Callable
    alpha_tilde: float
    v_op: float
    y_nn_abs: float

    def __post_init__(self):
        s = np.array([0.31j, 2.7j, 45.0j])
        T = np.asarray(self.t_sampler(s))
        lhs = T[:, :, 2] * self.v_op
        rhs = self.alpha_tilde * T[:, :, 1]
        if np.max(np.abs(lhs - rhs)) > 1e-8 * max(1.0, np.max(np.abs(T))):
            raise CertificateRefusal("transfer matrix has no exact V-Q droop (T_.V V is not alpha T_.Q)")

    @classmethod
    def from_params(cls, params: NormalFormParams, v_op: float, y_nn_abs: float) -> "BusCertInput":
        if not params.vq_droop:
            raise CertificateRefusal("device does not implement an exact V-Q droop")
        alpha = vq_droop_coefficient(params, v_op)
        return cls(lambda s: device_transfer_matrix(params, s), alpha, float(v_op), float(y_nn_abs))


@dataclass
class BusReport:
    bus: int
    cond_rhoQ_ok: bool
    cond_omegaP_ok: bool
    cond_crosstalk_ok: bool
    cond_alpha_ok: bool
    crosstalk_direction: str
    crosstalk_ok: dict  # direction -> bool
    margins: dict  # condition -> (margin, s attaining it); crosstalk under each direction
    relative_margins: dict  # same, divided by the size of the terms compared
    dc_ok: dict  # condition -> bool at s = 0
    dc_margins: dict
    boundary: dict  # condition -> worst case attained at the grid edge
    alpha_tilde: float
    alpha_bound: float
    curves: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return self.cond_rhoQ_ok and self.cond_omegaP_ok and self.cond_crosstalk_ok and self.cond_alpha_ok

    def failing(self) -> list[str]:
        names = {"rhoQ": self.cond_rhoQ_ok, "omegaP": self.cond_omegaP_ok,
                 "crosstalk": self.cond_crosstalk_ok, "alpha": self.cond_alpha_ok}
        return [k for k, v in names.items() if not v]


def check_bus(
    inp: BusCertInput,
    s_grid,
    crosstalk_direction: str = "text_consistent",
    bounds: GridBounds = GridBounds(),
    bus: int = 0,
) -> BusReport:
    """Evaluate the three conditions for one bus on ``s_grid``.

    The jw points and ``s = 0`` are assessed separately; a condition holds
    only if it holds on both.  Strict inequalities require the margin,
    relative to the magnitude of the compared terms at the same ``s``, to
    exceed ``STRICT_MARGIN``: strictly proper devices have ``Re T -> 0`` at
    high frequency and an absolute threshold would reject all of them.
    """
    if crosstalk_direction not in DIRECTIONS:
        raise ValueError(f"crosstalk_direction must be one of {DIRECTIONS}")
    s = np.asarray(s_grid, dtype=complex).ravel()
    dc_mask = s == 0
    ac = s[~dc_mask]

    def curves_at(points):
        T = np.asarray(inp.t_sampler(points))
        rp, rq = T[:, 0, 0], T[:, 0, 1]
        wp, wq = T[:, 1, 0], T[:, 1, 1]
        cross = 0.25 * np.abs(rp + np.conj(wq)) ** 2
        prod = rq.real * wp.real
        vals = {
            "rhoQ": -rq.real,
            "omegaP": -wp.real,
            "text_consistent": prod - cross,
            "as_printed": cross - prod,
        }
        big = np.abs(rq) * np.abs(wp) + cross
        scales = {"rhoQ": np.abs(rq), "omegaP": np.abs(wp), "text_consistent": big, "as_printed": big}
        return vals, scales

    def relative(vals, scales):
        with np.errstate(divide="ignore", invalid="ignore"):
            return {k: np.where(scales[k] > 0, vals[k] / scales[k], np.where(vals[k] > 0, np.inf, -np.inf))
                    for k in vals}

    keys = ("rhoQ", "omegaP", *DIRECTIONS)
    if ac.size:
        curves, scales = curves_at(ac)
        rel = relative(curves, scales)
    else:
        curves = {k: np.array([]) for k in keys}
        rel = dict(curves)
    margins, rel_margins, boundary = {}, {}, {}
    edge = np.zeros(ac.size, dtype=bool)
    if ac.size:
        w = np.abs(ac.imag)
        edge = np.isclose(w, w.min()) | np.isclose(w, w.max())
    for key in keys:
        if curves[key].size:
            k = int(np.argmin(curves[key]))
            margins[key] = (float(curves[key][k]), complex(ac[k]))
            k = int(np.argmin(rel[key]))
            rel_margins[key] = (float(rel[key][k]), complex(ac[k]))
            boundary[key] = bool(edge[k])
        else:
            margins[key] = rel_margins[key] = (np.inf, None)
            boundary[key] = False

    dc_margins, dc_rel = {}, {}
    if dc_mask.any():
        try:
            v0, s0 = curves_at(np.array([0j]))
            r0 = relative(v0, s0)
            dc_margins = {k: float(v0[k][0]) for k in keys}
            dc_rel = {k: float(r0[k][0]) for k in keys}
        except ResonanceError:
            dc_margins = dc_rel = {k: float("nan") for k in keys}
    dc_ok = {k: (not dc_rel) or bool(dc_rel[k] > STRICT_MARGIN) for k in keys}

    def holds(key):
        return bool(rel_margins[key][0] > STRICT_MARGIN) and dc_ok[key]

    bound = alpha_bound(inp.v_op, inp.y_nn_abs, bounds.gamma_max, bounds.dphi_max)
    margins["alpha"] = (float(inp.alpha_tilde - bound), None)
    cross_ok = {d: holds(d) for d in DIRECTIONS}
    return BusReport(
        bus=bus,
        cond_rhoQ_ok=holds("rhoQ"),
        cond_omegaP_ok=holds("omegaP"),
        cond_crosstalk_ok=cross_ok[crosstalk_direction],
        cond_alpha_ok=bool(inp.alpha_tilde >= bound),
        crosstalk_direction=crosstalk_direction,
        crosstalk_ok=cross_ok,
        margins=margins,
        relative_margins=rel_margins,
        dc_ok=dc_ok,
        dc_margins=dc_margins,
        boundary=boundary,
        alpha_tilde=float(inp.alpha_tilde),
        alpha_bound=float(bound),
        curves={"s": ac, **curves},
    )


@dataclass
class StabilityReport:
    buses: list
    bounds: GridBounds
    s_grid_meta: dict
    crosstalk_direction: str

    @property
    def verdict(self) -> bool:
        return all(b.ok for b in self.buses)

    def verdict_under(self, direction: str) -> bool:
        """Verdict with the crosstalk condition taken in ``direction``."""
        return all(
            b.cond_rhoQ_ok and b.cond_omegaP_ok and b.cond_alpha_ok and b.crosstalk_ok[direction] for b in self.buses
        )

    def failures(self) -> list[tuple[int, str, float]]:
        out = []
        for b in self.buses:
            for name in b.failing():
                key = b.crosstalk_direction if name == "crosstalk" else name
                out.append((b.bus, name, b.margins[key][0]))
        return out

    def summary(self) -> str:
        lines = [f"verdict: {'CERTIFIED' if self.verdict else 'NOT CERTIFIED'} (crosstalk direction {self.crosstalk_direction})"]
        lines.append(f"verdict with as_printed crosstalk: {self.verdict_under('as_printed')}")
        lines.append(f"verdict with text_consistent crosstalk: {self.verdict_under('text_consistent')}")
        for b in self.buses:
            m = b.margins
            lines.append(
                f"bus {b.bus}: rhoQ={b.cond_rhoQ_ok} ({m['rhoQ'][0]:.6g}) omegaP={b.cond_omegaP_ok} ({m['omegaP'][0]:.6g}) "
                f"crosstalk={b.cond_crosstalk_ok} ({m[b.crosstalk_direction][0]:.6g}) "
                f"alpha={b.cond_alpha_ok} ({b.alpha_tilde:.6g} vs bound {b.alpha_bound:.6g})"
            )
            edge = [k for k, v in b.boundary.items() if v]
            if edge:
                lines.append(f"  worst case at grid edge for: {', '.join(edge)}")
        for bus, name, margin in self.failures():
            lines.append(f"FAILED bus {bus} condition {name}: margin {margin:.6g}")
        return "\n".join(lines)

    def margin_rows(self):
        """Rows ``(bus, s_imag, rhoQ, omegaP, text_consistent, as_printed)`` for CSV output."""
        for b in self.buses:
            c = b.curves
            for k in range(c["s"].size):
                yield (b.bus, c["s"][k].imag, c["rhoQ"][k], c["omegaP"][k], c["text_consistent"][k], c["as_printed"][k])


def certify(
    devices: Mapping[int, NormalFormParams],
    net: Network,
    op: OperatingPoint,
    bounds: GridBounds,
    s_grid=None,
    crosstalk_direction: str = "text_consistent",
) -> StabilityReport:
    """Certify the operating point ``op`` of a lossless grid of V-Q droop devices."""
    if not net.lossless:
        raise CertificateRefusal(
            "the certificate only covers lossless (purely inductive) grids; this network has resistive lines"
        )
    missing = [b for b in range(net.n_bus) if b not in devices]
    if missing:
        raise CertificateRefusal(f"buses without a device model: {missing}")
    for b, prm in devices.items():
        if not isinstance(prm, NormalFormParams) or not prm.vq_droop:
            raise CertificateRefusal(f"device at bus {b} is not an H-W model with exact V-Q droop")
    bounds.check(net, op)
    s_grid = sample_s_grid() if s_grid is None else np.asarray(s_grid, dtype=complex)
    ynn = np.abs(np.diag(net.y))
    rows = []
    for b in range(net.n_bus):
        inp = BusCertInput.from_params(devices[b], float(op.v_mag[b]), float(ynn[b]))
        rows.append(check_bus(inp, s_grid, crosstalk_direction, bounds, bus=b))
    w = np.abs(s_grid.imag[s_grid != 0])
    meta = {
        "n_points": int(s_grid.size),
        "omega_min": float(w.min()) if w.size else 0.0,
        "omega_max": float(w.max()) if w.size else 0.0,
        "includes_dc": bool(np.any(s_grid == 0)),
    }
    return StabilityReport(rows, bounds, meta, crosstalk_direction)


def cross_validate(report: StabilityReport, oracle, tol: float = 1e-9) -> str:
    """``CONSISTENT``, ``INCONSISTENT`` or ``UNDECIDED_BY_CERTIFICATE``.

    ``oracle`` is a :class:`~cphase.linearize.FullSystemModel` or an array of
    eigenvalues; in the latter case the eigenvalue closest to zero is taken
    as the global phase mode and dropped.
    """
    if hasattr(oracle, "deflated_eigenvalues"):
        eigs = np.asarray(oracle.deflated_eigenvalues)
    else:
        eigs = np.asarray(oracle, dtype=complex)
        if eigs.size:
            eigs = np.delete(eigs, int(np.argmin(np.abs(eigs))))
    if not report.verdict:
        return "UNDECIDED_BY_CERTIFICATE"
    stable = eigs.size == 0 or float(np.max(eigs.real)) < -tol
    return "CONSISTENT" if stable else "INCONSISTENT"
