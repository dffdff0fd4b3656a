"""Complex-phase modelling, identification and stability tools for grid-forming inverters."""

__version__ = "0.1.0"

from .coords import ComplexFrequency, ComplexPhase, exp_map, log_map
from .device import NormalFormParams, Setpoints, device_transfer_matrix, droop_params
from .network import Network, OperatingPoint, build_admittance, solve_power_flow
from .sim import Scenario, SlackProfile, Trajectory, simulate
from .stability import GridBounds, StabilityReport, certify, cross_validate
from .sysid import HWNormalFormRegressor, fit_hw

__all__ = [
    "ComplexFrequency",
    "ComplexPhase",
    "GridBounds",
    "HWNormalFormRegressor",
    "Network",
    "NormalFormParams",
    "OperatingPoint",
    "Scenario",
    "Setpoints",
    "SlackProfile",
    "StabilityReport",
    "Trajectory",
    "build_admittance",
    "certify",
    "cross_validate",
    "device_transfer_matrix",
    "droop_params",
    "exp_map",
    "fit_hw",
    "log_map",
    "simulate",
    "solve_power_flow",
]
