"""Object-level 3D semantic mapping with a network of smart sensor nodes.

Sensor side: depth segmentation, keypoint-based PnP-RANSAC pose estimation
with ICP refinement. Backend: multi-view fusion, instance tracking and
object-centric voxel sub-maps. Plus a deterministic scene simulator, a
binary wire protocol and an evaluation harness.
"""

from .geometry import CameraModel, Pixel, Pose
from .models import ObjectModel, builtin_model, model_registry
from .pose_est import KeypointSet2D, ObjectObservation, PoseConfig, Skeleton3D
from .segmentation import DepthFrame, PointCloudSegment
from .tracker import TrackedObject, Tracker, TrackerConfig

__all__ = [
    "CameraModel",
    "DepthFrame",
    "KeypointSet2D",
    "ObjectModel",
    "ObjectObservation",
    "Pixel",
    "PointCloudSegment",
    "Pose",
    "PoseConfig",
    "Skeleton3D",
    "TrackedObject",
    "Tracker",
    "TrackerConfig",
    "builtin_model",
    "model_registry",
]

__version__ = "0.1.0"
