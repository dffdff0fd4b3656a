"""Coordinate maps between alpha-beta voltages, dq frames and complex phase.

Phasors are handled either as complex numbers ``v_alpha + 1j * v_beta`` or as
real arrays whose last axis has length 2.  Every function returns the same
representation it was given.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np


class ComplexPhase(NamedTuple):
    """Log-amplitude ``sigma`` and unwrapped phase angle ``phi`` (rad)."""

    sigma: np.ndarray | float
    phi: np.ndarray | float

    @property
    def complex(self):
        return np.asarray(self.sigma) + 1j * np.asarray(self.phi)


class ComplexFrequency(NamedTuple):
    """Relative amplitude velocity ``rho`` (1/s) and angular frequency ``omega`` (rad/s)."""

    rho: np.ndarray | float
    omega: np.ndarray | float

    @property
    def complex(self):
        return np.asarray(self.rho) + 1j * np.asarray(self.omega)


class PowerPair(NamedTuple):
    p: np.ndarray | float
    q: np.ndarray | float


def as_complex(v) -> np.ndarray | complex:
    """Return ``v`` as complex, accepting complex input or real ``(..., 2)`` arrays."""
    if np.iscomplexobj(v):
        return v
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        return complex(arr)
    if arr.shape[-1] != 2:
        raise ValueError(f"real phasor arrays need a trailing axis of length 2, got {arr.shape}")
    return arr[..., 0] + 1j * arr[..., 1]


def as_vector(z) -> np.ndarray:
    """Complex phasor(s) to real ``(..., 2)`` arrays."""
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-1)


def _like(template, z):
    if np.iscomplexobj(template) or np.ndim(template) == 0:
        return z
    return as_vector(z)


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotate(v, angle):
    """Apply ``R(angle)`` to a phasor (counter-clockwise rotation)."""
    return _like(v, as_complex(v) * np.exp(1j * np.asarray(angle)))


def park(v, frame_angle):
    """Stationary frame to a frame rotated by ``frame_angle``: ``R(-angle) v``."""
    return _like(v, as_complex(v) * np.exp(-1j * np.asarray(frame_angle)))


def inverse_park(vdq, frame_angle):
    return _like(vdq, as_complex(vdq) * np.exp(1j * np.asarray(frame_angle)))


def _nearest_branch(phi, prev_phi):
    return phi + 2 * np.pi * np.round((prev_phi - phi) / (2 * np.pi))


def log_map(v, prev_phi=None) -> ComplexPhase:
    """Complex phase ``ln(v)``.

    With ``prev_phi`` the branch of the angle closest to ``prev_phi`` is
    returned; otherwise the principal branch ``(-pi, pi]``.
    """
    z = as_complex(v)
    mag = np.abs(z)
    if np.any(mag <= 0) or not np.all(np.isfinite(mag)):
        raise ValueError("log_map needs finite phasors with nonzero magnitude")
    phi = np.angle(z)
    if prev_phi is not None:
        phi = _nearest_branch(phi, prev_phi)
    if np.ndim(phi) == 0:
        return ComplexPhase(float(np.log(mag)), float(phi))
    return ComplexPhase(np.log(mag), phi)


def unwrap_phase(v) -> ComplexPhase:
    """Complex phase of a sampled phasor series with a continuous angle.

    Each sample takes the branch nearest to its predecessor.
    """
    z = np.asarray(as_complex(v))
    if z.ndim != 1:
        raise ValueError("unwrap_phase expects a 1-D series")
    theta = log_map(z)
    return ComplexPhase(theta.sigma, np.unwrap(theta.phi))


def exp_map(theta: ComplexPhase, vector: bool = False):
    sigma, phi = np.asarray(theta[0]), np.asarray(theta[1])
    z = np.exp(sigma) * (np.cos(phi) + 1j * np.sin(phi))
    if z.ndim == 0:
        z = complex(z)
    return as_vector(z) if vector else z


def complex_frequency_series(theta: ComplexPhase, dt: float) -> ComplexFrequency:
    """Numerical complex frequency of an (unwrapped) complex-phase series.

    Second-order central differences inside, second-order one-sided
    differences at both ends.
    """
    sigma = np.asarray(theta[0], dtype=float)
    phi = np.asarray(theta[1], dtype=float)
    if sigma.shape != phi.shape or sigma.ndim != 1:
        raise ValueError("sigma and phi must be 1-D series of equal length")
    if sigma.size < 3:
        raise ValueError("complex_frequency_series needs at least 3 samples")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return ComplexFrequency(np.gradient(sigma, dt, edge_order=2), np.gradient(phi, dt, edge_order=2))


def apparent_power(v, i) -> PowerPair:
    """Active and reactive power ``v * conj(i)`` for matching phasor shapes."""
    s = as_complex(v) * np.conj(as_complex(i))
    if np.ndim(s) == 0:
        return PowerPair(float(np.real(s)), float(np.imag(s)))
    return PowerPair(s.real, s.imag)
