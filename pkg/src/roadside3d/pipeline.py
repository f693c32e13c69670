"""BEV-to-3D annotation pipeline.

UAV-plane rotated boxes are mapped to the world ground plane through the
UAV-to-world homography, lifted to 3D using the terrain altitude at the box
center and the class average height, then projected into every roadside
camera. Trajectory post-processing (short-track pruning and gap filling)
and camera/UAV time-shift estimation live here too.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import camgeo, polygeo
from .camgeo import Homography
from .model import (Box3D, ClassHeightTable, Clip, DataError, InvariantError, RotatedRect2D,
                    Sample, SceneConfig, Terrain, Trajectory, TrajectoryPoint, normalize_angle)


# ---------------------------------------------------------------------------
# length refinement


def refine_length(observed_length: float, uav_height: float, vehicle_height: float,
                  offset: float = 0.0) -> float:
    """Undo the apparent elongation of a vehicle of height h seen from altitude H.

    ``offset`` is the ground-plane distance from the UAV nadir to the
    vehicle (the projected length of the shortest UAV-vehicle line).
    """
    if not observed_length > 0:
        raise ValueError("observed length must be positive")
    if not offset >= 0:
        raise ValueError("offset must be non-negative")
    if not 0 <= vehicle_height < uav_height:
        raise ValueError(f"need 0 <= vehicle height < UAV height, got h={vehicle_height}, H={uav_height}")
    # l' - (l' + d) h / H, equal to (l' + d)(H - h) / H - d but exact at h = 0
    return observed_length - (observed_length + offset) * vehicle_height / uav_height


@dataclass(frozen=True)
class LengthRefinementInput:
    observed_length: float
    uav_height: float
    vehicle_height: float
    offset: float = 0.0

    def __post_init__(self):
        if not self.observed_length > 0:
            raise InvariantError("observed_length", "must be positive")
        if not self.uav_height > self.vehicle_height >= 0:
            raise InvariantError("vehicle_height", "need uav_height > vehicle_height >= 0")
        if not self.offset >= 0:
            raise InvariantError("offset", "must be non-negative")

    def refined(self) -> float:
        return refine_length(self.observed_length, self.uav_height, self.vehicle_height, self.offset)


# ---------------------------------------------------------------------------
# UAV plane -> world plane


def fit_rectangle(corners: np.ndarray, frame: str = "world") -> tuple[RotatedRect2D, float]:
    """Least-squares rectangle through four corners ordered like ``RotatedRect2D.corners``.

    Center is the corner mean, the angle averages the two length-edge
    directions and each dimension averages its opposite edges. The residual
    is the RMS distance from the corners to the fitted rectangle's corners.
    """
    c = np.asarray(corners, dtype=float)
    center = c.mean(axis=0)
    e1, e2 = c[0] - c[1], c[3] - c[2]
    u1, u2 = e1 / np.linalg.norm(e1), e2 / np.linalg.norm(e2)
    d = u1 + u2
    angle = math.atan2(d[1], d[0])
    length = (np.linalg.norm(e1) + np.linalg.norm(e2)) / 2
    width = (np.linalg.norm(c[0] - c[3]) + np.linalg.norm(c[1] - c[2])) / 2
    rect = RotatedRect2D(center, length, width, normalize_angle(angle), frame)
    fitted = rect.corners()
    dist = np.linalg.norm(c[:, None, :] - fitted[None, :, :], axis=2).min(axis=1)
    return rect, float(np.sqrt(np.mean(dist ** 2)))


def map_rect(H: Homography, rect: RotatedRect2D, frame: str) -> tuple[RotatedRect2D, float]:
    return fit_rectangle(camgeo.apply_homography(H, rect.corners()), frame)


def bev_rect_to_world(H_uav: Homography, rect: RotatedRect2D,
                      return_residual: bool = False):
    """Map a UAV-pixel rectangle onto the world ground plane."""
    if rect.frame != "uav":
        raise polygeo.GeometryError(f"expected a UAV-frame rectangle, got {rect.frame!r}")
    out, residual = map_rect(H_uav, rect, "world")
    return (out, residual) if return_residual else out


def lift_to_3d(rect: RotatedRect2D, terrain: Terrain, heights: ClassHeightTable, cls: str,
               track=None, velocity=None, attribute=None) -> Box3D:
    """World ground rectangle -> 3D box resting on the terrain."""
    if rect.frame != "world":
        raise polygeo.GeometryError(f"expected a world-frame rectangle, got {rect.frame!r}")
    x, y = rect.center
    altitude = terrain.altitude(x, y)
    h = heights[cls]
    return Box3D((x, y, altitude + h / 2), (rect.length, rect.width, h), rect.angle, cls,
                 track, velocity, attribute)


@dataclass(frozen=True)
class UavRecord:
    """One tracked UAV-plane detection."""

    timestamp: float
    track: object
    cls: str
    rect: RotatedRect2D  # frame "uav"
    clip: str = "0"
    offset: float | None = None  # ground distance from UAV nadir, for length refinement


def lift_uav_records(records: Sequence[UavRecord], H_uav: Homography, scene: SceneConfig,
                     rate: float = 2.0, uav_height: float | None = None,
                     velocity_from_tracks: bool = True) -> list[Clip]:
    """Run steps 2-3 of the pipeline on UAV records, grouped into clips.

    With ``uav_height`` set, box lengths are corrected with ``refine_length``
    using each record's ``offset`` (0 when absent). Velocities are estimated
    per track by finite differences when requested.
    """
    by_clip: dict[str, dict[float, list[Box3D]]] = defaultdict(lambda: defaultdict(list))
    for rec in records:
        world = bev_rect_to_world(H_uav, rec.rect)
        if uav_height is not None:
            length = refine_length(world.length, uav_height, scene.class_heights[rec.cls],
                                   rec.offset or 0.0)
            world = replace(world, length=length)
        box = lift_to_3d(world, scene.terrain, scene.class_heights, rec.cls, rec.track)
        by_clip[rec.clip][rec.timestamp].append(box)
    clips = []
    for clip_id, samples in by_clip.items():
        ts = sorted(samples)
        clip = Clip(clip_id, [Sample(t, samples[t]) for t in ts], rate, scene.id)
        clips.append(estimate_velocities(clip) if velocity_from_tracks else clip)
    return clips


def estimate_velocities(clip: Clip, stopped_speed: float = 0.5) -> Clip:
    """Attach per-box ground velocity (central differences along each track)
    and a moving/stopped attribute."""
    tracks: dict[object, list[tuple[float, Box3D]]] = defaultdict(list)
    for s in clip.samples:
        for b in s.boxes:
            if b.track is not None:
                tracks[b.track].append((s.timestamp, b))
    vel: dict[tuple[object, float], tuple[float, float]] = {}
    for track, pts in tracks.items():
        if len(pts) < 2:
            continue
        for k, (t, b) in enumerate(pts):
            lo = pts[max(k - 1, 0)]
            hi = pts[min(k + 1, len(pts) - 1)]
            dt = hi[0] - lo[0]
            vel[(track, t)] = ((hi[1].center[0] - lo[1].center[0]) / dt,
                               (hi[1].center[1] - lo[1].center[1]) / dt)
    samples = []
    for s in clip.samples:
        boxes = []
        for b in s.boxes:
            v = vel.get((b.track, s.timestamp))
            if v is not None:
                attr = "moving" if math.hypot(*v) > stopped_speed else "stopped"
                b = replace(b, velocity=v, attribute=attr)
            boxes.append(b)
        samples.append(Sample(s.timestamp, boxes))
    return replace(clip, samples=tuple(samples))


# ---------------------------------------------------------------------------
# 3D -> cameras


@dataclass(frozen=True)
class BoxProjection:
    index: int
    polygon: polygeo.Polygon2D
    corners: tuple  # 8 entries, each (u, v) or None when behind the near plane
    partial: bool


def project_box(camera, box: Box3D, index: int = 0, clip: bool = True) -> BoxProjection | None:
    img = polygeo.box3d_image_polygon(camera, box, clip=clip)
    if img is None:
        return None
    uv, valid = camgeo.project_points(camera, polygeo.box3d_corners(box))
    corners = tuple((float(p[0]), float(p[1])) if ok else None for p, ok in zip(uv, valid))
    return BoxProjection(index, img.polygon, corners, img.partial)


def project_annotations(scene: SceneConfig, sample: Sample,
                        clip: bool = True) -> dict[str, list[BoxProjection]]:
    """Per-camera projections of every box visible in that camera."""
    out = {}
    for cam in scene.cameras:
        projs = []
        for i, box in enumerate(sample.boxes):
            p = project_box(cam, box, i, clip)
            if p is not None:
                projs.append(p)
        out[cam.id] = projs
    return out


# ---------------------------------------------------------------------------
# trajectories


def trajectories_from_clip(clip: Clip) -> list[Trajectory]:
    points: dict[object, list[TrajectoryPoint]] = defaultdict(list)
    classes = {}
    for s in clip.samples:
        for b in s.boxes:
            if b.track is None:
                raise DataError("boxes without track ids cannot form trajectories")
            points[b.track].append(TrajectoryPoint(s.timestamp, b))
            classes.setdefault(b.track, b.cls)
    return [Trajectory(t, classes[t], pts) for t, pts in points.items()]


def clip_from_trajectories(template: Clip, trajs: Iterable[Trajectory]) -> Clip:
    """Rebuild a clip; sample timestamps are the union of the template's and the trajectories'."""
    by_time: dict[float, list[Box3D]] = {s.timestamp: [] for s in template.samples}
    for tr in trajs:
        for p in tr.points:
            by_time.setdefault(p.timestamp, []).append(p.box)
    ts = sorted(by_time)
    return replace(template, samples=tuple(Sample(t, by_time[t]) for t in ts))


def prune_trajectories(trajs: Sequence[Trajectory], min_duration: float = 1.0) -> list[Trajectory]:
    """Drop trajectories lasting less than ``min_duration`` seconds (boundary kept)."""
    return [t for t in trajs if t.duration >= min_duration - 1e-9]


def _lerp_box(a, b, w: float):
    dyaw = math.remainder(b_yaw(b) - b_yaw(a), 2 * math.pi)
    yaw = normalize_angle(b_yaw(a) + w * dyaw)
    if isinstance(a, Box3D):
        center = tuple((1 - w) * x + w * y for x, y in zip(a.center, b.center))
        size = tuple((1 - w) * x + w * y for x, y in zip(a.size, b.size))
        vel = None
        if a.velocity is not None and b.velocity is not None:
            vel = tuple((1 - w) * x + w * y for x, y in zip(a.velocity, b.velocity))
        return replace(a, center=center, size=size, yaw=yaw, velocity=vel)
    center = tuple((1 - w) * x + w * y for x, y in zip(a.center, b.center))
    return replace(a, center=center, length=(1 - w) * a.length + w * b.length,
                   width=(1 - w) * a.width + w * b.width, angle=yaw)


def b_yaw(box) -> float:
    return box.yaw if isinstance(box, Box3D) else box.angle


def interpolate_gaps(traj: Trajectory, rate: float) -> Trajectory:
    """Fill missing interior frames by linear interpolation (shortest-arc yaw).

    Endpoints are never extrapolated; inserted points carry
    ``interpolated=True``.
    """
    pts = list(traj.points)
    if len(pts) < 2:
        return traj
    frames = [round(p.timestamp * rate) for p in pts]
    out = [pts[0]]
    for (fa, pa), (fb, pb) in zip(zip(frames, pts), zip(frames[1:], pts[1:])):
        for f in range(fa + 1, fb):
            w = (f - fa) / (fb - fa)
            t = pa.timestamp + w * (pb.timestamp - pa.timestamp)
            out.append(TrajectoryPoint(t, _lerp_box(pa.box, pb.box, w), interpolated=True))
        out.append(pb)
    return replace(traj, points=tuple(out))


def refine_tracks(clip: Clip, min_duration: float = 1.0) -> Clip:
    """Prune short trajectories, then fill gaps in the survivors."""
    trajs = prune_trajectories(trajectories_from_clip(clip), min_duration)
    trajs = [interpolate_gaps(t, clip.rate) for t in trajs]
    return clip_from_trajectories(clip, trajs)


# ---------------------------------------------------------------------------
# synchronization


@dataclass(frozen=True)
class SyncConfig:
    shift_range: tuple[float, float] = (-3.0, 3.0)
    shift_step: float = 0.5
    score: str = "mean_rect_iou"

    def __post_init__(self):
        if not self.shift_step > 0:
            raise InvariantError("shift_step", "must be positive")
        if not self.shift_range[0] < self.shift_range[1]:
            raise InvariantError("shift_range", "lo must be < hi")
        if self.score not in ("mean_rect_iou",):
            raise InvariantError("score", f"unknown score {self.score!r}")

    def grid(self) -> np.ndarray:
        lo, hi = self.shift_range
        n = int(math.floor((hi - lo) / self.shift_step + 1e-9))
        return lo + self.shift_step * np.arange(n + 1)


def image_bounding_rect(poly: polygeo.Polygon2D) -> RotatedRect2D:
    x0, y0, x1, y1 = poly.bounds()
    return RotatedRect2D(((x0 + x1) / 2, (y0 + y1) / 2), max(x1 - x0, 1e-9), max(y1 - y0, 1e-9),
                         0.0, "image")


def _aabb(rects: Sequence[RotatedRect2D]) -> np.ndarray:
    out = np.empty((len(rects), 4))
    for k, r in enumerate(rects):
        c = r.corners()
        out[k] = [c[:, 0].min(), c[:, 1].min(), c[:, 0].max(), c[:, 1].max()]
    return out


def _iou_matrix(a: Sequence[RotatedRect2D], b: Sequence[RotatedRect2D]) -> np.ndarray:
    axis_aligned = all(abs(math.remainder(r.angle, math.pi / 2)) < 1e-12 for r in (*a, *b))
    if axis_aligned:
        A, B = _aabb(a), _aabb(b)
        ix = np.clip(np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0]), 0, None)
        iy = np.clip(np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1]), 0, None)
        inter = ix * iy
        area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
        area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
        return inter / (area_a[:, None] + area_b[None, :] - inter)
    return np.array([[polygeo.rotated_rect_iou(x, y) for y in b] for x in a]).reshape(len(a), len(b))


def greedy_match_score(projected: Sequence[RotatedRect2D], observed: Sequence[RotatedRect2D]) -> tuple[float, int]:
    """Greedy one-to-one matching by IoU. Returns (sum of matched IoU, normalizer)
    where the normalizer is max(#projected, #observed)."""
    n = max(len(projected), len(observed))
    if not projected or not observed:
        return 0.0, n
    iou = _iou_matrix(projected, observed)
    flat = np.argsort(-iou, axis=None, kind="stable")
    used_p, used_o = set(), set()
    total = 0.0
    for k in flat:
        i, j = divmod(int(k), iou.shape[1])
        if iou[i, j] <= 0:
            break
        if i in used_p or j in used_o:
            continue
        used_p.add(i)
        used_o.add(j)
        total += float(iou[i, j])
    return total, n


CameraObservations = Mapping[str, Sequence[tuple[float, Sequence[RotatedRect2D]]]]


def time_shift_scores(uav_clip: Clip, cam_obs: CameraObservations, scene: SceneConfig,
                      cfg: SyncConfig | None = None) -> dict[float, float]:
    """Projection score for every candidate shift that has temporal overlap.

    A camera observation stamped t is compared with the UAV sample stamped
    t - shift, so a camera stream lagging the UAV by +d seconds scores best
    at shift d.
    """
    cfg = cfg or SyncConfig()
    if not any(len(v) for v in cam_obs.values()):
        raise DataError("no camera observations")
    uav_times = np.array([s.timestamp for s in uav_clip.samples])
    proj_cache: dict[tuple[str, int], list[RotatedRect2D]] = {}

    def projected(cam_id: str, k: int) -> list[RotatedRect2D]:
        key = (cam_id, k)
        if key not in proj_cache:
            cam = scene.camera(cam_id)
            rects = []
            for box in uav_clip.samples[k].boxes:
                img = polygeo.box3d_image_polygon(cam, box)
                if img is not None:
                    rects.append(image_bounding_rect(img.polygon))
            proj_cache[key] = rects
        return proj_cache[key]

    scores = {}
    for shift in cfg.grid():
        total, norm = 0.0, 0
        for cam_id, frames in cam_obs.items():
            for t_obs, rects in frames:
                k = int(np.searchsorted(uav_times, t_obs - shift - 1e-6))
                if k >= len(uav_times) or abs(uav_times[k] - (t_obs - shift)) > 1e-6:
                    continue
                s, n = greedy_match_score(projected(cam_id, k), list(rects))
                total += s
                norm += n
        if norm > 0:
            scores[float(shift)] = total / norm
    if not scores:
        raise DataError("no temporal overlap between UAV samples and camera observations at any shift")
    return scores


def estimate_time_shift(uav_clip: Clip, cam_obs: CameraObservations, scene: SceneConfig,
                        cfg: SyncConfig | None = None) -> float:
    """Shift (seconds) with the best projection score; ties go to the smallest |shift|."""
    scores = time_shift_scores(uav_clip, cam_obs, scene, cfg)
    best = max(scores.values())
    return min((s for s, v in scores.items() if v == best), key=lambda s: (abs(s), s))
