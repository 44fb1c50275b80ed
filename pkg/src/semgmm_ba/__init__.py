"""Sliding-window LiDAR bundle adjustment on semantic Gaussian-mixture maps."""

from .geometry import Pose, Twist, apply, compose, exp_map, inverse, log_map

__all__ = [
    "Pose",
    "Twist",
    "apply",
    "compose",
    "exp_map",
    "inverse",
    "log_map",
]

__version__ = "0.1.0"
