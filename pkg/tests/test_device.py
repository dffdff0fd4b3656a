import numpy as np
import pytest

from cphase.device import (
    NormalFormParams,
    ResonanceError,
    Setpoints,
    device_transfer_matrix,
    droop_params,
    error_coords,
    hw_derivatives,
    vq_droop_coefficient,
)
from cphase.sysid import simulate_hw


def test_error_coords_examples():
    np.testing.assert_allclose(error_coords(1 + 0j, 1 + 0j, Setpoints(1, 0, 1)), [0, 0, 0])
    np.testing.assert_allclose(error_coords(1 + 0j, 0j, Setpoints(0.5, 0, 1)), [-0.5, 0, 0])
    np.testing.assert_allclose(error_coords(1j, 1 + 0j, Setpoints(0, 0, 1)), [0, 1, 0], atol=1e-15)


def test_setpoints_validation():
    with pytest.raises(ValueError):
        Setpoints(0, 0, 0)


def test_hw_steady_state_and_pure_droop():
    prm = droop_params(2.0, 0.5, 0.1, 0.1, Setpoints(), n_x=2)
    xdot, eta = hw_derivatives(prm, np.zeros(2), np.zeros(3))
    assert np.all(xdot == 0) and eta.rho == 0 and eta.omega == 0
    k_p, k_q = 2.0, 0.5
    pure = NormalFormParams(np.zeros((0, 0)), np.zeros((0, 3)), np.zeros((2, 0)), [[0, -k_q, 0], [-k_p, 0, 0]])
    _, eta = hw_derivatives(pure, np.zeros(0), np.array([0.1, -0.2, 0.0]))
    assert eta.rho == pytest.approx(-k_q * -0.2) and eta.omega == pytest.approx(-k_p * 0.1)


def test_hw_matches_independent_products(rng):
    A, B, C, D = rng.normal(size=(2, 2)), rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), rng.normal(size=(2, 3))
    prm = NormalFormParams(A, B, C, D)
    x, e = rng.normal(size=2), rng.normal(size=3)
    xdot, eta = hw_derivatives(prm, x, e)
    ref_x = [sum(A[r, k] * x[k] for k in range(2)) + sum(B[r, k] * e[k] for k in range(3)) for r in range(2)]
    ref_y = [sum(C[r, k] * x[k] for k in range(2)) + sum(D[r, k] * e[k] for k in range(3)) for r in range(2)]
    np.testing.assert_allclose(xdot, ref_x, atol=1e-14)
    np.testing.assert_allclose([eta.rho, eta.omega], ref_y, atol=1e-14)


def test_params_are_read_only_and_validated():
    prm = droop_params(1.0, 1.0, 0.1, 0.1, Setpoints())
    with pytest.raises(ValueError):
        prm.A[0, 0] = 3.0
    with pytest.raises(ValueError):
        NormalFormParams([[np.nan]], np.zeros((1, 3)), np.zeros((2, 1)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        NormalFormParams(np.zeros((0, 0)), np.zeros((0, 3)), np.zeros((2, 0)), [[0, 1, 2], [0, 1, 0]], vq_droop=True)


def test_params_dict_roundtrip():
    prm = droop_params(1.0, 2.0, 0.1, 0.3, Setpoints(0.2, 0.1, 1.05), alpha=2.0)
    back = NormalFormParams.from_dict(prm.to_dict())
    for name in "ABCD":
        np.testing.assert_array_equal(getattr(back, name), getattr(prm, name))
    assert back.setpoints == prm.setpoints and back.vq_droop


def test_droop_small_tau_matches_pure_droop():
    dt = 1e-5
    e = np.zeros((2001, 3))
    e[:, 0] = 0.1
    e[:, 1] = -0.05
    fast = droop_params(1.0, 1.0, 1e-4, 1e-4, Setpoints(), n_x=2)
    pure = droop_params(1.0, 1.0, None, None, Setpoints(), n_x=0)
    y_fast = simulate_hw(fast, e, dt)
    y_pure = simulate_hw(pure, e, dt)
    k = int(10 * 1e-4 / dt)
    np.testing.assert_allclose(y_fast[k:], y_pure[k:], rtol=0.02)


def test_droop_dc_gain():
    prm = droop_params(2.0, 1.0, 0.5, 0.2, Setpoints(), n_x=2)
    assert device_transfer_matrix(prm, 0.0)[1, 0].real == pytest.approx(-2.0)
    assert abs(device_transfer_matrix(prm, 1j / 0.5)[1, 0]) == pytest.approx(2 / np.sqrt(2))


def test_droop_state_decay_rate():
    from cphase.sysid import simulate_states

    prm = droop_params(2.0, 1.0, 0.5, 0.2, Setpoints(), n_x=2)
    x = simulate_states(prm.A, prm.B, np.zeros((1001, 3)), 1e-3, x0=np.array([1.0, 1.0]))
    np.testing.assert_allclose(x[-1], [np.exp(-1 / 0.5), np.exp(-1 / 0.2)], rtol=1e-10)


def test_transfer_matrix_limits(rng):
    pure = droop_params(2.0, 0.5, None, None, Setpoints(), n_x=0)
    for s in (0.0, 1j, 3 + 4j):
        np.testing.assert_array_equal(device_transfer_matrix(pure, s), pure.D)
    prm = droop_params(2.0, 0.5, 0.1, 0.2, Setpoints(), n_x=2, crosstalk=(0.1, 0.2))
    np.testing.assert_allclose(device_transfer_matrix(prm, 1e12), prm.D, atol=1e-10)
    T = device_transfer_matrix(prm, np.array([0.5j, 2j]))
    assert T.shape == (2, 2, 3)


def test_transfer_matrix_resonance():
    prm = droop_params(2.0, 0.5, 0.5, 0.2, Setpoints(), n_x=2)
    with pytest.raises(ResonanceError):
        device_transfer_matrix(prm, -2.0)


def _prop_params(r):
    B = np.array([[0.0, 0.5, 0.5 * r], [1.0, 0.0, 0.0]])
    return NormalFormParams(-np.eye(2), B, np.eye(2), np.zeros((2, 3)), vq_droop=True)


def test_vq_droop_coefficient_convention():
    # e_v column = 0.5 * e_q column: T_.V = 0.5 T_.Q, so alpha = 0.5 V
    prm = _prop_params(0.5)
    assert vq_droop_coefficient(prm, 1.0) == pytest.approx(0.5)
    assert vq_droop_coefficient(prm, 2.0) == pytest.approx(1.0)


def test_vq_droop_coefficient_rejects_non_proportional():
    B = np.array([[0.0, 0.5, 0.1], [1.0, 0.0, 0.3]])
    prm = NormalFormParams(-np.eye(2), B, np.eye(2), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        vq_droop_coefficient(prm, 1.0)
    with pytest.raises(ValueError):
        NormalFormParams(-np.eye(2), B, np.eye(2), np.zeros((2, 3)), vq_droop=True)


def test_droop_alpha_is_vq_coefficient():
    for n_x in (0, 1, 2):
        prm = droop_params(1.0, 2.0, 0.1, 0.3, Setpoints(), alpha=1.7, n_x=n_x, crosstalk=(0.1, -0.2))
        assert vq_droop_coefficient(prm, 1.1) == pytest.approx(1.7 * 1.1)


def test_droop_param_validation():
    with pytest.raises(ValueError):
        droop_params(-1.0, 1.0, 0.1, 0.1, Setpoints())
    with pytest.raises(ValueError):
        droop_params(1.0, 1.0, 0.1, None, Setpoints(), n_x=2)
