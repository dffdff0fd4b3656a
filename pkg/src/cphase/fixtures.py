"""Reference devices and randomized droop grids used by the tests and the CLI."""
from __future__ import annotations

import numpy as np

from .device import NormalFormParams, Setpoints, droop_params
from .network import PQ, Network, PowerFlowError, Slack, solve_power_flow
from .stability import GridBounds, alpha_bound

TEST_SETPOINTS = Setpoints(0.5, 0.1, 1.0)


def droop_test_device(n_x: int = 0, sp: Setpoints = TEST_SETPOINTS) -> NormalFormParams:
    """The droop device used throughout the test-suite (stiff V-Q droop, alpha = 5)."""
    return droop_params(k_p=2.0, k_q=0.5, tau_p=0.2, tau_q=0.1, sp=sp, alpha=5.0, n_x=n_x)


def hw_fixtures() -> dict[str, NormalFormParams]:
    """H-W devices shipped as fixtures; all are phase-shift invariant by construction."""
    rng = np.random.default_rng(3)
    A = np.array([[-2.0, 0.5, 0.0], [-0.5, -3.0, 0.2], [0.0, 0.1, -1.0]])
    B = rng.normal(size=(3, 3))
    C = rng.normal(size=(2, 3))
    D = rng.normal(size=(2, 3))
    return {
        "droop0": droop_test_device(0),
        "droop1": droop_test_device(1),
        "droop2": droop_test_device(2),
        "crosstalk2": droop_params(1.0, 0.8, 0.1, 0.05, TEST_SETPOINTS, alpha=2.0, n_x=2, crosstalk=(0.2, -0.1)),
        "generic3": NormalFormParams(A, B, C, D, TEST_SETPOINTS),
    }


def destabilized(params: NormalFormParams) -> NormalFormParams:
    """Flip the sign of the frequency output row (a droop with negative ``k_p``)."""
    C = params.C.copy()
    D = params.D.copy()
    C[1] *= -1
    D[1] *= -1
    return NormalFormParams(params.A, params.B, C, D, params.setpoints, params.vq_droop)


class PhaseDependentDevice:
    """A voltage source whose frequency depends on the absolute phase (not invariant)."""

    def __init__(self, params: NormalFormParams, strength: float = 0.05):
        self.params = params
        self.strength = strength

    def eta(self, sigma, phi, p, q):
        e = np.array([p - self.params.setpoints.p_set, q - self.params.setpoints.q_set,
                      np.exp(sigma) - self.params.setpoints.v_set])
        rho, omega = self.params.D @ e
        return np.array([rho, omega + self.strength * np.sin(phi)])

    def f(self, v, i):
        z = complex(v[0], v[1])
        s = z * complex(i[0], -i[1])
        rho, omega = self.eta(np.log(abs(z)), np.angle(z), s.real, s.imag)
        dz = z * complex(rho, omega)
        return np.array([dz.real, dz.imag])


def random_topology(rng, n_bus: int, extra: float = 0.4) -> list[tuple[int, int]]:
    """Random spanning tree plus each remaining pair with probability ``extra``."""
    order = rng.permutation(n_bus)
    edges = set()
    for k in range(1, n_bus):
        a, b = int(order[k]), int(order[rng.integers(0, k)])
        edges.add((min(a, b), max(a, b)))
    for a in range(n_bus):
        for b in range(a + 1, n_bus):
            if (a, b) not in edges and rng.random() < extra:
                edges.add((a, b))
    return sorted(edges)


def random_droop_grid(
    rng,
    n_bus: int | None = None,
    crosstalk: float = 0.3,
    alpha_factor: tuple = (0.3, 3.0),
    max_tries: int = 20,
):
    """A random lossless droop grid at a solved operating point.

    Returns ``(devices, network, operating_point, bounds)``.  Set-points equal
    the solved power flow, so the operating point is an equilibrium.  The
    V-Q droop coefficient of each device is the bus's alpha bound times a
    factor drawn from ``alpha_factor``, so both certified and non-certified
    grids occur.  Half of the devices get crosstalk gains up to ``crosstalk``.
    """
    for _ in range(max_tries):
        n = int(rng.integers(2, 7)) if n_bus is None else n_bus
        edges = random_topology(rng, n)
        lines = {e: complex(0.0, -rng.uniform(2.0, 20.0)) for e in edges}
        net = Network(n, lines)
        spec = [Slack(1.0, 0.0)] + [PQ(rng.uniform(-0.8, 0.8), rng.uniform(-0.3, 0.3)) for _ in range(n - 1)]
        try:
            op = solve_power_flow(net, spec)
        except PowerFlowError:
            continue
        if np.any(op.v_mag < 0.7) or np.any(op.v_mag > 1.3):
            continue
        try:
            bounds = GridBounds.from_operating_point(net, op)
        except ValueError:
            continue
        ynn = np.abs(np.diag(net.y))
        devices = {}
        for b in range(n):
            v = float(op.v_mag[b])
            bound = alpha_bound(v, ynn[b], bounds.gamma_max, bounds.dphi_max)
            alpha_tilde = bound * rng.uniform(*alpha_factor) + rng.uniform(0.0, 0.05)
            k_p, k_q = rng.uniform(0.1, 5.0, 2)
            tau_p, tau_q = rng.uniform(0.02, 1.0, 2)
            ct = tuple(rng.uniform(-crosstalk, crosstalk, 2)) if rng.random() < 0.5 else (0.0, 0.0)
            sp = Setpoints(float(op.p[b]), float(op.q[b]), v)
            devices[b] = droop_params(k_p, k_q, tau_p, tau_q, sp, alpha=alpha_tilde / v,
                                      n_x=int(rng.integers(0, 3)), crosstalk=ct)
        return devices, net, op, bounds
    raise RuntimeError("could not draw a feasible random grid")
