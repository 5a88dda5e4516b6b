"""Monocular visual-inertial odometry through a flat refractive port.

The refractive index of the medium in front of the camera is estimated
online together with the robot state by an iterated extended Kalman filter
driven by direct photometric patch errors.
"""

from .camera import EquidistantParams, Intrinsics, RefractiveCamera
from .dataset import Dataset, StateRecord, compute_ape, read_dataset, read_state_log, write_state_log
from .filter import FilterConfig, NoiseConfig, RefractiveVIO
from .runner import run_estimator
from .sensitivity import HeuristicParams, heuristic_value, heuristic_weight

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EquidistantParams",
    "FilterConfig",
    "HeuristicParams",
    "Intrinsics",
    "NoiseConfig",
    "RefractiveCamera",
    "RefractiveVIO",
    "StateRecord",
    "compute_ape",
    "heuristic_value",
    "heuristic_weight",
    "read_dataset",
    "read_state_log",
    "run_estimator",
    "write_state_log",
]
