"""Monocular and multi-view occlusion of vehicle boxes, and occlusion-based splits.

For a camera c, a box's occlusion is the fraction of its projected polygon
covered by the union of the polygons of boxes strictly nearer to c. A box
with no visible polygon in c counts as fully occluded there. The multi-view
value averages the per-camera values over all cameras of the scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import polygeo
from .model import Box3D, CameraModel, Clip, DataError, Sample, SceneConfig

DISTANCE_METRICS = ("center", "corner", "depth")
REFERENCE_EASY_THRESHOLD = 0.23
REFERENCE_HARD_THRESHOLD = 0.48
ROUND_EPS = 1e-9


def box_distances(camera: CameraModel, boxes: Sequence[Box3D], metric: str = "center") -> np.ndarray:
    """Distance of each box to the camera.

    ``center``: Euclidean box-center to camera-center distance (default);
    ``corner``: distance of the nearest box corner; ``depth``: camera-frame z
    of the box center.
    """
    if metric not in DISTANCE_METRICS:
        raise ValueError(f"unknown distance metric {metric!r}")
    if not boxes:
        return np.empty(0)
    if metric == "corner":
        corners = np.stack([polygeo.box3d_corners(b) for b in boxes])
        return np.linalg.norm(corners - camera.t, axis=2).min(axis=1)
    centers = np.array([b.center for b in boxes])
    if metric == "depth":
        return (centers - camera.t) @ camera.R[:, 2]
    return np.linalg.norm(centers - camera.t, axis=1)


def _snap(x: float) -> float:
    if x < ROUND_EPS:
        return 0.0
    if x > 1.0 - ROUND_EPS:
        return 1.0
    return x


def camera_occlusions(camera: CameraModel, boxes: Sequence[Box3D], metric: str = "center",
                      clip: bool = True) -> np.ndarray:
    """Monocular occlusion of every box in one camera, shape (N,)."""
    n = len(boxes)
    occ = np.ones(n)
    polys: list[np.ndarray | None] = []
    for b in boxes:
        img = polygeo.box3d_image_polygon(camera, b, clip=clip)
        polys.append(None if img is None else img.polygon.vertices)
    dist = box_distances(camera, boxes, metric)
    for i in range(n):
        pi = polys[i]
        if pi is None:
            continue
        area = polygeo._signed_area(pi)
        if area <= 0:
            continue
        pieces = []
        for j in range(n):
            if j == i or polys[j] is None or not dist[j] < dist[i]:
                continue
            piece = polygeo._intersect_arrays(polys[j], pi)
            if piece is not None:
                pieces.append(piece)
        covered = polygeo._union_area_arrays(pieces)
        occ[i] = _snap(min(1.0, covered / area))
    return occ


def monocular_occlusion(scene: SceneConfig, sample: Sample, camera: CameraModel | str, index: int,
                        metric: str = "center", clip: bool = True) -> float:
    if isinstance(camera, str):
        camera = scene.camera(camera)
    if not 0 <= index < len(sample.boxes):
        raise IndexError(index)
    return float(camera_occlusions(camera, sample.boxes, metric, clip)[index])


@dataclass(frozen=True)
class OcclusionReport:
    camera_ids: tuple[str, ...]
    occ: np.ndarray = field(repr=False)  # (boxes, cameras)
    m_occ: np.ndarray = field(repr=False)  # (boxes,)

    def per_camera(self, camera_id: str) -> np.ndarray:
        return self.occ[:, self.camera_ids.index(camera_id)]


def occlusion_report(scene: SceneConfig, sample: Sample, metric: str = "center",
                     clip: bool = True) -> OcclusionReport:
    if not scene.cameras:
        raise DataError("scene has no cameras")
    occ = np.stack([camera_occlusions(c, sample.boxes, metric, clip) for c in scene.cameras],
                   axis=1) if sample.boxes else np.empty((0, len(scene.cameras)))
    m = occ.mean(axis=1) if len(occ) else np.empty(0)
    return OcclusionReport(tuple(c.id for c in scene.cameras), occ, m)


def multiview_occlusion(scene: SceneConfig, sample: Sample, index: int, metric: str = "center",
                        clip: bool = True) -> float:
    if not scene.cameras:
        raise DataError("scene has no cameras")
    vals = [monocular_occlusion(scene, sample, c, index, metric, clip) for c in scene.cameras]
    return float(np.mean(vals))


def clip_occlusion(scene: SceneConfig, clip: Clip, metric: str = "center", clip_to_image: bool = True) -> float:
    """Mean multi-view occlusion over every (sample, box) of the clip."""
    vals = [occlusion_report(scene, s, metric, clip_to_image).m_occ for s in clip.samples if s.boxes]
    if not vals:
        raise DataError(f"clip {clip.id} has no boxes")
    return float(np.concatenate(vals).mean())


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitResult:
    train: tuple[str, ...]
    easy: tuple[str, ...]
    hard: tuple[str, ...]
    easy_threshold: float | None  # largest occlusion in the easy set
    hard_threshold: float | None  # smallest occlusion in the hard set
    reference_easy_threshold: float = REFERENCE_EASY_THRESHOLD
    reference_hard_threshold: float = REFERENCE_HARD_THRESHOLD

    def as_dict(self) -> dict:
        return {
            "train": list(self.train), "easy": list(self.easy), "hard": list(self.hard),
            "thresholds": {"easy_max": self.easy_threshold, "hard_min": self.hard_threshold,
                           "reference_easy": self.reference_easy_threshold,
                           "reference_hard": self.reference_hard_threshold},
        }


def split_dataset(clip_occlusions: Sequence[tuple[str, float]], easy_frac: float = 0.10,
                  hard_frac: float = 0.10) -> SplitResult:
    """Lowest-occlusion clips go to easy, highest to hard, the rest to train."""
    for name, f in (("easy_frac", easy_frac), ("hard_frac", hard_frac)):
        if not 0 <= f < 0.5:
            raise ValueError(f"{name} must lie in [0, 0.5), got {f}")
    if easy_frac + hard_frac >= 1:
        raise ValueError("fractions overlap")
    items = sorted(((float(v), str(c)) for c, v in clip_occlusions))
    n = len(items)
    n_easy = math.floor(n * easy_frac + 1e-9)
    n_hard = math.floor(n * hard_frac + 1e-9)
    easy = items[:n_easy]
    hard = items[n - n_hard:] if n_hard else []
    train = items[n_easy:n - n_hard]
    return SplitResult(
        tuple(c for _, c in train), tuple(c for _, c in easy), tuple(c for _, c in hard),
        easy[-1][0] if easy else None, hard[0][0] if hard else None)


def occlusion_difficulty(occ: float, threshold: float = 0.8) -> str:
    """Monocular benchmark difficulty: easy below the threshold, hard otherwise."""
    if not 0 <= occ <= 1:
        raise ValueError(f"occlusion must lie in [0, 1], got {occ}")
    return "easy" if occ < threshold else "hard"
