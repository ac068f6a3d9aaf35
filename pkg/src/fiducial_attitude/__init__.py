"""Attitude of a rotating platform from a monocular camera and fiducial markers."""

try:
    from importlib.metadata import PackageNotFoundError, version

    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .camera import Intrinsics, Pattern, SystemConfig, SystemGeometry, default_config, load_config, project_all
from .estimator import AttitudeSession, AttitudeSolution, ObservationSet, solve_attitude
from .calibration import CalibrationResult, ParameterVector, calibrate, initialize_guess
from .rotation import params_to_quat, quat_to_params, quat_to_matrix

__all__ = [
    "AttitudeSession",
    "AttitudeSolution",
    "CalibrationResult",
    "Intrinsics",
    "ObservationSet",
    "ParameterVector",
    "Pattern",
    "SystemConfig",
    "SystemGeometry",
    "calibrate",
    "default_config",
    "initialize_guess",
    "load_config",
    "params_to_quat",
    "project_all",
    "quat_to_matrix",
    "quat_to_params",
    "solve_attitude",
]
