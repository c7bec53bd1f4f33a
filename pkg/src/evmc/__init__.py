"""Event-camera motion compensation: event volumes, deblurring losses,
egomotion geometry, direct motion fitting and evaluation metrics."""

from .egomotion import DisparityField, Pose, disparity_to_depth, euler_to_rotation, pose_disparity_to_flow
from .events import (
    CalibrationError,
    CameraIntrinsics,
    EventParseError,
    EventSlice,
    StereoRig,
    load_calibration,
    load_events,
    save_events,
)
from .losses import LossReport, time_loss, total_flow_loss, total_sfm_loss
from .metrics import aee, depth_error, flow_to_displacement, rpe, rre
from .optimize import MotionModel, OptimizeConfig, fit
from .voxel import EventVolume, build_volume, decode_sparse_volume
from .warp import FlowField, propagate_events

__version__ = "0.1.0"

__all__ = [
    "CalibrationError", "CameraIntrinsics", "DisparityField", "EventParseError", "EventSlice",
    "EventVolume", "FlowField", "LossReport", "MotionModel", "OptimizeConfig", "Pose", "StereoRig",
    "aee", "build_volume", "decode_sparse_volume", "depth_error", "disparity_to_depth",
    "euler_to_rotation", "fit", "flow_to_displacement", "load_calibration", "load_events",
    "pose_disparity_to_flow", "propagate_events", "rpe", "rre", "save_events", "time_loss",
    "total_flow_loss", "total_sfm_loss",
]
