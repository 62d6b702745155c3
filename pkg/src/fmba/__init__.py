"""Differentiable feature-metric bundle adjustment.

A fixed-iteration Levenberg-Marquardt solver over per-pixel depth and SE(3)
camera poses whose damping factor is predicted by a small MLP, differentiable
end to end, together with view-synthesis training losses and depth/odometry
evaluation metrics. Verified against synthetic scenes with exact ground truth.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DatasetError, DegenerateProblemError
from .geometry import (
    CameraIntrinsics,
    Pixel,
    SE3Pose,
    Twist,
    compose,
    euler_pose,
    invert,
    project,
    se3_exp,
    se3_log,
)
from .raster import DepthMap, Raster

__all__ = [
    "CameraIntrinsics",
    "ConfigError",
    "DatasetError",
    "DegenerateProblemError",
    "DepthMap",
    "Pixel",
    "Raster",
    "SE3Pose",
    "Twist",
    "compose",
    "euler_pose",
    "invert",
    "project",
    "se3_exp",
    "se3_log",
]
