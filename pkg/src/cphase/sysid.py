"""Identification of Hammerstein-Wiener normal forms from trajectory data.

The regression target is the complex frequency ``eta`` and the regressors are
the error coordinates ``e``; the complex phase enters only through its
derivative, so a constant phase offset or a different base frequency in the
training data leaves the fit unchanged.

The linear subsystem is simulated with an exact discretization under a
polynomial input hold (cubic by default).  Fitting runs in two stages: a
linear least-squares fit on inputs filtered through a scanned set of real
poles, then an output-error refinement of all continuous-time matrices with
Levenberg-Marquardt.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import factorial

import numpy as np
from scipy.linalg import expm
from scipy.ndimage import uniform_filter1d
from scipy.optimize import least_squares, minimize_scalar
from scipy.signal import lfilter
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import check_odd_window, check_positive, check_series
from .coords import ComplexFrequency, as_complex
from .device import NormalFormParams, Setpoints, device_transfer_matrix, error_coords

E_CHANNELS = ("e_p", "e_q", "e_v")
ETA_CHANNELS = ("rho", "omega")
_HOLD_NODES = {0: (0,), 1: (0, 1), 3: (-1, 0, 1, 2)}


class RankDeficientError(ValueError):
    pass


def nrmse(pred, ref, scale=None) -> np.ndarray:
    """Per-channel RMS error divided by the reference range.

    Channels whose reference range is below 1e-9 are normalized by their RMS
    value instead.  ``scale`` overrides the denominator.
    """
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {ref.shape}")
    squeeze = ref.ndim == 1
    if squeeze:
        pred, ref = pred[:, None], ref[:, None]
    rmse = np.sqrt(np.mean((pred - ref) ** 2, axis=0))
    if scale is None:
        rng = np.ptp(ref, axis=0)
        rms = np.sqrt(np.mean(ref**2, axis=0))
        scale = np.where(rng < 1e-9, rms, rng)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), rmse.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(scale > 0, rmse / scale, np.where(rmse == 0, 0.0, np.inf))
    return out[0] if squeeze else out


def estimate_eta(theta, dt: float, smoothing_window: int = 1) -> ComplexFrequency:
    """Central-difference complex frequency, then a centred moving average."""
    check_positive("dt", dt)
    w = check_odd_window(smoothing_window)
    sigma = np.asarray(theta[0], dtype=float)
    phi = np.asarray(theta[1], dtype=float)
    if sigma.size < max(3, w):
        raise ValueError("series too short for the requested differencing/smoothing")
    rho = np.gradient(sigma, dt, edge_order=2)
    omega = np.gradient(phi, dt, edge_order=2)
    if w > 1:
        rho = uniform_filter1d(rho, w, mode="nearest")
        omega = uniform_filter1d(omega, w, mode="nearest")
    return ComplexFrequency(rho, omega)


@dataclass
class IdDataset:
    t: np.ndarray
    e: np.ndarray  # (n, 3)
    theta: np.ndarray  # (n, 2) sigma, unwrapped phi
    eta: np.ndarray | None = None  # (n, 2), deviation from omega_ref
    metadata: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def __len__(self) -> int:
        return self.t.size


def build_dataset(traj, bus: int, sp: Setpoints, omega_ref: float | None = None, use_eta: bool = True) -> IdDataset:
    """Error coordinates and complex phase of one bus of a trajectory.

    ``traj`` is a :class:`~cphase.sim.Trajectory` or a column dict read from
    a trajectory CSV.  Recorded ``omega`` values are shifted by ``omega_ref``
    (default: the trajectory's nominal frequency).
    """
    if isinstance(traj, dict):
        need = [f"bus{bus}_{c}" for c in ("sigma", "phi", "p", "q")]
        missing = [c for c in ["t"] + need if c not in traj]
        if missing:
            raise KeyError(f"trajectory is missing channel(s): {', '.join(missing)}")
        t = traj["t"]
        sigma, phi, p, q = (traj[c] for c in need)
        rho = traj.get(f"bus{bus}_rho")
        omega = traj.get(f"bus{bus}_omega")
        omega_ref = 0.0 if omega_ref is None else omega_ref
    else:
        if not 0 <= bus < traj.n_bus:
            raise IndexError(f"trajectory has no bus {bus}")
        t = traj.t
        sigma, phi, p, q = traj.sigma[:, bus], traj.phi[:, bus], traj.p[:, bus], traj.q[:, bus]
        rho, omega = traj.rho[:, bus], traj.omega[:, bus]
        omega_ref = traj.omega_nom if omega_ref is None else omega_ref
    e = np.column_stack([p - sp.p_set, q - sp.q_set, np.exp(sigma) - sp.v_set])
    eta = None
    if use_eta and rho is not None and omega is not None:
        eta = np.column_stack([rho, omega - omega_ref])
    return IdDataset(
        np.asarray(t, dtype=float),
        e,
        np.column_stack([sigma, phi]),
        eta,
        {"bus": bus, "omega_ref": omega_ref, "setpoints": sp},
    )


def _lagrange_coeffs(nodes) -> np.ndarray:
    """Row j holds the monomial coefficients of the j-th Lagrange basis polynomial."""
    nodes = np.asarray(nodes, dtype=float)
    V = np.vander(nodes, increasing=True)
    return np.linalg.inv(V).T


def _hold_integrals(A: np.ndarray, h: float, order: int):
    """``e^{Ah}`` and ``G_p = int_0^h e^{A(h-t)} (t/h)^p dt`` for p <= order."""
    n = A.shape[0]
    m = order + 2
    F = np.zeros((n * m, n * m))
    F[:n, :n] = A
    for k in range(1, m):
        F[(k - 1) * n : k * n, k * n : (k + 1) * n] = np.eye(n) if k > 1 else np.eye(n)
    E = expm(F * h)
    Ad = E[:n, :n]
    gam = [factorial(p) / h**p * E[:n, (p + 1) * n : (p + 2) * n] for p in range(order + 1)]
    return Ad, gam


def simulate_states(A, B, e, dt: float, x0=None, hold: int = 3) -> np.ndarray:
    """States of ``x' = A x + B e`` at the sample times, for inputs ``e`` of shape ``(n, m)``.

    The input between samples follows a Lagrange polynomial through the
    neighbouring samples (``hold`` = 0, 1 or 3).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    e = np.asarray(e, dtype=float)
    n = A.shape[0]
    N = e.shape[0]
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    if n == 0:
        return np.zeros((N, 0))
    nodes = _HOLD_NODES[hold]
    order = len(nodes) - 1
    Ad, gam = _hold_integrals(A, dt, order)
    gam = np.stack(gam)  # (order+1, n, n)

    u = np.zeros((N - 1, n))
    k = np.arange(N - 1)
    lo = k + min(nodes)
    shift = np.clip(-lo, 0, None) - np.clip(k + max(nodes) - (N - 1), 0, None)
    shifts = np.unique(shift)
    for sh in shifts:
        sel = shift == sh
        local = np.asarray(nodes) + sh
        coef = _lagrange_coeffs(local)  # (nodes, powers)
        G = np.einsum("jp,pab,bc->jac", coef, gam, B)
        for j, off in enumerate(local):
            u[sel] += e[k[sel] + off] @ G[j].T
    return _linear_recursion(Ad, u, x0)


def _linear_recursion(Ad: np.ndarray, u: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """``x[k+1] = Ad x[k] + u[k]`` for all k, vectorized over eigenmodes."""
    n = Ad.shape[0]
    N = u.shape[0] + 1
    lam, V = np.linalg.eig(Ad)
    if np.linalg.cond(V) < 1e8:
        Vi = np.linalg.inv(V)
        w = u @ Vi.T
        z = np.empty((N, n), dtype=complex)
        z0 = Vi @ x0
        for j in range(n):
            zi, _ = lfilter([1.0], [1.0, -lam[j]], w[:, j], zi=[lam[j] * z0[j]])
            z[0, j] = z0[j]
            z[1:, j] = zi
        return (z @ V.T).real
    x = np.empty((N, n))
    x[0] = x0
    for k in range(N - 1):
        x[k + 1] = Ad @ x[k] + u[k]
    return x


def simulate_hw(params: NormalFormParams, e, dt: float, x0=None, hold: int = 3) -> np.ndarray:
    """Open-loop ``eta`` response of the linear subsystem to sampled ``e``."""
    x = simulate_states(params.A, params.B, e, dt, x0, hold)
    return x @ params.C.T + np.asarray(e) @ params.D.T


def _check_rank(e: np.ndarray):
    std = e.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    z = (e - e.mean(axis=0)) / scale
    for k, s in enumerate(std):
        if s <= 1e-12 * max(1.0, np.abs(e[:, k]).max()):
            raise RankDeficientError(f"rank-deficient regression: channel {E_CHANNELS[k]} is not excited")
    _, sv, vt = np.linalg.svd(z, full_matrices=False)
    if sv[-1] < 1e-8 * sv[0]:
        k = int(np.argmax(np.abs(vt[-1])))
        raise RankDeficientError(f"rank-deficient regression: channel {E_CHANNELS[k]} is collinear with the others")


@dataclass
class FitResult:
    params: NormalFormParams
    training_nrmse: np.ndarray  # per eta channel
    n_x: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def degraded(self) -> bool:
        return bool(self.diagnostics.get("degraded", False))


def _pack(A, B, C, D, x0):
    return np.concatenate([A.ravel(), B.ravel(), C.ravel(), D.ravel(), x0.ravel()])


def _unpack(theta, n):
    k = 0
    A = theta[k : k + n * n].reshape(n, n); k += n * n
    B = theta[k : k + 3 * n].reshape(n, 3); k += 3 * n
    C = theta[k : k + 2 * n].reshape(2, n); k += 2 * n
    D = theta[k : k + 6].reshape(2, 3); k += 6
    x0 = theta[k : k + n]
    return A, B, C, D, x0


def _stage1(e, eta, dt, n_x, hold, pole_range):
    """Filtered-regressor least squares with scanned real poles."""
    if n_x == 0:
        D, *_ = np.linalg.lstsq(e, eta, rcond=None)
        return np.zeros((0, 0)), np.zeros((0, 3)), np.zeros((2, 0)), D.T, {}

    cache = {}

    def filtered(lam):
        if lam not in cache:
            cache[lam] = simulate_states(lam * np.eye(3), np.eye(3), e, dt, hold=hold)
        return cache[lam]

    def solve(poles):
        reg = np.hstack([e] + [filtered(p) for p in poles])
        coef, *_ = np.linalg.lstsq(reg, eta, rcond=None)
        res = eta - reg @ coef
        return float(np.sum(res**2)), coef

    lo, hi = pole_range
    grid = -np.geomspace(lo, hi, 24)
    best = None
    for combo in combinations_with_replacement(grid, n_x):
        if len(set(combo)) < n_x:
            continue
        cost, _ = solve(combo)
        if best is None or cost < best[0]:
            best = (cost, list(combo))
    poles = best[1]
    # coordinate-wise refinement of each pole in log space
    for _ in range(2):
        for j in range(n_x):
            def obj(logr, j=j):
                trial = list(poles)
                trial[j] = -np.exp(logr)
                if len(set(trial)) < n_x:
                    return np.inf
                return solve(trial)[0]
            r0 = np.log(-poles[j])
            out = minimize_scalar(obj, bounds=(r0 - 0.3, r0 + 0.3), method="bounded", options={"xatol": 1e-10})
            if out.fun <= solve(poles)[0]:
                poles[j] = -float(np.exp(out.x))
    cost, coef = solve(poles)
    D = coef[:3].T
    A = np.diag(poles)
    B = np.zeros((n_x, 3))
    C = np.zeros((2, n_x))
    for j in range(n_x):
        G = coef[3 + 3 * j : 6 + 3 * j].T  # (2, 3), rank one in a diagonal realization
        u, s, vt = np.linalg.svd(G)
        C[:, j] = u[:, 0] * np.sqrt(s[0])
        B[j] = vt[0] * np.sqrt(s[0])
    return A, B, C, D, {"stage1_poles": poles, "stage1_cost": cost}


def fit_hw(
    ds: IdDataset,
    n_x: int = 1,
    method_stage: str = "both",
    hold: int = 3,
    stable: bool = True,
    pole_range: tuple = (0.05, 500.0),
    max_nfev: int = 400,
) -> FitResult:
    """Fit ``(A, B, C, D)`` of an H-W normal form to ``eta`` given ``e``.

    ``method_stage`` is ``"both"`` (default), ``"stage1"`` or ``"stage2"``
    (the latter still uses stage 1 for initialization).  A failed or unstable
    refinement falls back to the stage-1 model with ``degraded`` set.
    """
    if ds.eta is None:
        raise ValueError("dataset has no eta series; use estimate_eta first")
    if n_x < 0:
        raise ValueError("model order must be non-negative")
    need = 50 * (n_x**2 + 3 * n_x + 6)
    if len(ds) < need:
        raise ValueError(f"dataset too short: {len(ds)} samples, need at least {need} for n_x={n_x}")
    e = check_series("e", ds.e, 3)
    eta = check_series("eta", ds.eta, 2)
    _check_rank(e)
    dt = ds.dt
    sp = ds.metadata.get("setpoints", Setpoints())

    A, B, C, D, diag = _stage1(e, eta, dt, n_x, hold, pole_range)
    scale = eta.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)

    def predict(theta):
        A_, B_, C_, D_, x0 = _unpack(theta, n_x)
        x = simulate_states(A_, B_, e, dt, x0, hold) if n_x else np.zeros((e.shape[0], 0))
        return x @ C_.T + e @ D_.T

    def residual(theta):
        r = (predict(theta) - eta) / scale
        return r.ravel()

    theta1 = _pack(A, B, C, D, np.zeros(n_x))
    cost1 = float(np.sum(residual(theta1) ** 2))
    diag.update({"stage1_cost": cost1, "degraded": False})
    theta = theta1
    if method_stage != "stage1" and (n_x > 0 or method_stage == "stage2"):
        try:
            with np.errstate(all="ignore"):
                sol = least_squares(residual, theta1, method="lm", x_scale="jac", max_nfev=max_nfev * theta1.size,
                                    xtol=1e-12, ftol=1e-14, gtol=1e-14)
            cost2 = float(np.sum(sol.fun**2))
            A2 = _unpack(sol.x, n_x)[0]
            ok = np.all(np.isfinite(sol.x)) and cost2 <= cost1
            if ok and stable and n_x and np.max(np.linalg.eigvals(A2).real) >= 0:
                ok = False
            diag.update({"stage2_cost": cost2, "nfev": int(sol.nfev), "status": int(sol.status)})
            if ok:
                theta = sol.x
            else:
                diag["degraded"] = True
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            diag.update({"degraded": True, "stage2_error": str(exc)})

    A, B, C, D, x0 = _unpack(theta, n_x)
    params = NormalFormParams(A, B, C, D, sp)
    fit = predict(theta)
    diag["x0"] = x0.copy()
    diag["theta_nrmse"] = _theta_nrmse(ds, fit)
    return FitResult(params, nrmse(fit, eta), n_x, diag)


def theta_reference(ds: IdDataset) -> np.ndarray:
    """Measured ``[sigma, phi]`` relative to the first sample, with the reference rotation removed."""
    ref = ds.theta - ds.theta[0]
    return ref - np.column_stack([np.zeros(len(ds)), ds.metadata.get("omega_ref", 0.0) * (ds.t - ds.t[0])])


def integrate_eta(eta: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoidal integral of ``eta`` starting at zero."""
    return np.vstack([np.zeros((1, 2)), np.cumsum(0.5 * dt * (eta[1:] + eta[:-1]), axis=0)])


def predict_theta(params: NormalFormParams, ds: IdDataset, x0=None, hold: int = 3) -> np.ndarray:
    """Open-loop complex-phase prediction driven by the measured error coordinates.

    Comparable with :func:`theta_reference`.
    """
    return integrate_eta(simulate_hw(params, ds.e, ds.dt, x0, hold), ds.dt)


def _theta_nrmse(ds: IdDataset, eta_fit: np.ndarray) -> np.ndarray:
    """Complex-phase error of the integrated fitted ``eta``."""
    return nrmse(integrate_eta(eta_fit, ds.dt), theta_reference(ds))


def predict_closed_loop(params: NormalFormParams, sc, bus: int):
    """Re-run ``sc`` with the device at ``bus`` replaced by ``params``.

    The replacement keeps the scenario's set-points for that bus.
    """
    from .sim import simulate

    if bus not in sc.devices:
        raise KeyError(f"bus {bus} carries no device in this scenario")
    sp = sc.devices[bus].setpoints
    return simulate(sc.with_device(bus, params.with_setpoints(sp)))


class HWNormalFormRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_hw`.

    ``X`` holds uniformly sampled error coordinates ``(n, 3)``, ``y`` the
    complex frequency ``(n, 2)``; ``dt`` is the sample period.  ``predict``
    simulates from ``x_c = 0``.
    """

    def __init__(self, n_x=1, dt=1e-3, hold=3, stable=True, method_stage="both", pole_range=(0.05, 500.0)):
        self.n_x = n_x
        self.dt = dt
        self.hold = hold
        self.stable = stable
        self.method_stage = method_stage
        self.pole_range = pole_range

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if X.shape[1] != 3 or y.ndim != 2 or y.shape[1] != 2:
            raise ValueError("X must have 3 columns (e_p, e_q, e_v) and y 2 columns (rho, omega)")
        t = np.arange(X.shape[0]) * self.dt
        ds = IdDataset(t, X, np.zeros((X.shape[0], 2)), y)
        self.result_ = fit_hw(ds, self.n_x, self.method_stage, self.hold, self.stable, self.pole_range)
        self.params_ = self.result_.params
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        return simulate_hw(self.params_, X, self.dt, hold=self.hold)

    def transfer_matrix(self, s):
        check_is_fitted(self, "params_")
        return device_transfer_matrix(self.params_, s)


class ErrorCoordinateTransformer(TransformerMixin, BaseEstimator):
    """Input nonlinearity: rows ``[v_alpha, v_beta, i_alpha, i_beta]`` to ``e``."""

    def __init__(self, p_set=0.0, q_set=0.0, v_set=1.0):
        self.p_set = p_set
        self.q_set = q_set
        self.v_set = v_set

    def fit(self, X, y=None):
        check_array(X)
        self.n_features_in_ = 4
        return self

    def transform(self, X):
        X = check_array(X)
        if X.shape[1] != 4:
            raise ValueError("expected columns v_alpha, v_beta, i_alpha, i_beta")
        return error_coords(X[:, :2], X[:, 2:], Setpoints(self.p_set, self.q_set, self.v_set))


class ComplexPhaseTransformer(TransformerMixin, BaseEstimator):
    """Output nonlinearity and its inverse: alpha-beta rows to ``[sigma, phi]`` (unwrapped)."""

    def fit(self, X, y=None):
        check_array(X)
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        X = check_array(X)
        z = as_complex(X)
        if np.any(np.abs(z) == 0):
            raise ValueError("zero voltage has no complex phase")
        return np.column_stack([np.log(np.abs(z)), np.unwrap(np.angle(z))])

    def inverse_transform(self, X):
        X = check_array(X)
        z = np.exp(X[:, 0] + 1j * X[:, 1])
        return np.column_stack([z.real, z.imag])
