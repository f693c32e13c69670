"""Roadside multi-camera 3D annotation geometry, occlusion and evaluation toolkit."""

from .model import (Box3D, CameraModel, ClassHeightTable, Clip, DataError, Detection, InvariantError,
                    PerceptionCuboid, RotatedRect2D, Sample, SceneConfig, Terrain, Trajectory,
                    TrajectoryPoint)

__version__ = "0.1.0"

__all__ = [
    "Box3D", "CameraModel", "ClassHeightTable", "Clip", "DataError", "Detection", "InvariantError",
    "PerceptionCuboid", "RotatedRect2D", "Sample", "SceneConfig", "Terrain", "Trajectory",
    "TrajectoryPoint",
]
