"""Synthetic roadside scenes with exact ground truth.

A straight multi-lane road runs along world X through the middle of the
perception cuboid. Poles alternate between the two roadsides; each pole
carries near-range (wide) and far-range (tele) cameras looking along the
road in both directions. Vehicles drive at constant speed in their lane,
with one shared speed per lane so boxes never overlap.

The UAV view is a similarity map of the ground plane (with the image y
axis flipped), so UAV-plane rectangles lift back to the ground truth
exactly. A projective component can be injected for rectangle-fit tests.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import camgeo, pipeline
from .camgeo import Homography
from .model import (VEHICLE_CLASSES, Box3D, CameraModel, ClassHeightTable, Clip, InvariantError,
                    PerceptionCuboid, RotatedRect2D, Sample, SceneConfig, Terrain)
from .pipeline import UavRecord

CLASS_SIZES = {"car": (4.6, 1.85), "van": (5.2, 2.0), "bus": (12.0, 2.55), "truck": (10.0, 2.5)}
CLASS_HEIGHTS = {"car": 1.5, "van": 2.1, "bus": 3.3, "truck": 3.6}
TERRAIN_MODES = ("flat", "planar-slope", "sinusoidal")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    poles: int = 4
    cameras_per_pole: int = 2
    camera_height: float = 12.0
    lanes: int = 4
    lane_width: float = 3.75
    vehicles: tuple[int, int] = (20, 40)
    speed_range: tuple[float, float] = (15.0, 28.0)
    clip_length: int = 60
    rate: float = 2.0
    terrain: str = "flat"
    congestion: float = 0.0
    image_size: tuple[int, int] = (1920, 1080)
    pole_span: tuple[float, float] = (-330.0, 330.0)
    class_mix: tuple[float, float, float, float] = (0.7, 0.15, 0.05, 0.1)  # car, van, bus, truck
    class_heights: tuple[tuple[str, float], ...] = tuple(CLASS_HEIGHTS.items())
    uav_scale: float = 6.0  # pixels per meter
    uav_rotation: float = 0.05  # radians
    uav_offset: tuple[float, float] = (2600.0, 400.0)
    uav_projective: tuple[float, float] = (0.0, 0.0)
    uav_height: float = 300.0
    uav_perspective: bool = False  # elongate UAV-observed lengths by the vehicle height
    cuboid: PerceptionCuboid = field(default_factory=PerceptionCuboid)

    def __post_init__(self):
        for name in ("poles", "cameras_per_pole", "lanes", "clip_length"):
            if int(getattr(self, name)) < 1:
                raise InvariantError(name, "must be >= 1")
        lo, hi = self.vehicles
        if not 1 <= lo <= hi:
            raise InvariantError("vehicles", "need 1 <= lo <= hi")
        if not 0 <= self.speed_range[0] <= self.speed_range[1]:
            raise InvariantError("speed_range", "speeds must be non-negative and ordered")
        if self.camera_height < 10:
            raise InvariantError("camera_height", "roadside cameras are mounted above 10 m")
        if self.terrain not in TERRAIN_MODES:
            raise InvariantError("terrain", f"expected one of {TERRAIN_MODES}")
        if not 0 <= self.congestion <= 1:
            raise InvariantError("congestion", "must lie in [0, 1]")
        if not self.rate > 0:
            raise InvariantError("rate", "must be positive")

    @property
    def heights(self) -> ClassHeightTable:
        return ClassHeightTable(self.class_heights)


def _rng(cfg: SynthConfig, *stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *stream])


def _altitude_fn(mode: str):
    if mode == "flat":
        return lambda x, y: np.zeros_like(x)
    if mode == "planar-slope":
        return lambda x, y: 1.0 + 0.002 * x + 0.005 * y
    return lambda x, y: 1.0 + 0.5 * np.sin(2 * np.pi * x / 160.0) * np.cos(2 * np.pi * y / 120.0)


def make_terrain(cfg: SynthConfig, cell_size: float = 5.0) -> Terrain:
    (x0, x1), (y0, y1) = cfg.cuboid.x_range, cfg.cuboid.y_range
    xs = np.arange(x0 - 10, x1 + 10 + 1e-9, cell_size)
    ys = np.arange(y0 - 10, y1 + 10 + 1e-9, cell_size)
    gx, gy = np.meshgrid(xs, ys)
    grid = _altitude_fn(cfg.terrain)(gx, gy)
    return Terrain((xs[0], ys[0]), cell_size, grid.tolist())


def road_half_width(cfg: SynthConfig) -> float:
    return cfg.lanes * cfg.lane_width / 2


def lane_centers(cfg: SynthConfig) -> list[tuple[float, int]]:
    """(y, direction) per lane; lanes at negative y drive toward +X."""
    half = road_half_width(cfg)
    out = []
    for j in range(cfg.lanes):
        y = -half + (j + 0.5) * cfg.lane_width
        out.append((y, 1 if y < 0 else -1))
    return out


def generate_scene(cfg: SynthConfig, scene_id: str | None = None) -> SceneConfig:
    """Cameras on poles along both roadsides, covering the road in both directions."""
    lo, hi = cfg.pole_span
    cub = cfg.cuboid
    if not (cub.x_range[0] <= lo < hi <= cub.x_range[1]):
        raise InvariantError("pole_span", "poles must stand inside the perception cuboid")
    spacing = (hi - lo) / max(cfg.poles - 1, 1)
    if cfg.poles > 1 and spacing < 20.0:
        raise InvariantError("poles", f"cuboid too small for {cfg.poles} poles (spacing {spacing:.1f} m < 20 m)")
    rng = _rng(cfg, 0)
    terrain = make_terrain(cfg)
    xs = np.linspace(lo, hi, cfg.poles) if cfg.poles > 1 else np.array([(lo + hi) / 2])
    side_offset = road_half_width(cfg) + 3.0
    width, height = cfg.image_size
    cams = []
    for k, x in enumerate(xs):
        side = 1 if k % 2 == 0 else -1
        y = side * side_offset
        base = terrain.altitude(float(np.clip(x, *terrain.extent[0])), y)
        pos = np.array([x, y, base + cfg.camera_height + rng.uniform(0.0, 3.0)])
        for j in range(cfg.cameras_per_pole):
            direction = 1 if (j + k) % 2 == 0 else -1
            near = j % 2 == 0
            focal = (1000.0 if near else 2600.0) * rng.uniform(0.9, 1.1)
            ahead = (25.0 if near else 90.0) * rng.uniform(0.9, 1.1)
            target = np.array([x + direction * ahead, 0.0, base])
            rot = camgeo.look_at(pos, target)
            cams.append(CameraModel(f"cam{len(cams):02d}", width, height, focal, focal,
                                    width / 2, height / 2, rot.ravel(), pos))
    return SceneConfig(scene_id or f"synth-{cfg.seed}", cams, terrain, cfg.heights, cub)


def uav_world_to_image(cfg: SynthConfig) -> Homography:
    c, s = math.cos(cfg.uav_rotation), math.sin(cfg.uav_rotation)
    k = cfg.uav_scale
    tu, tv = cfg.uav_offset
    p1, p2 = cfg.uav_projective
    return Homography(np.array([[k * c, -k * s, tu], [-k * s, -k * c, tv], [p1, p2, 1.0]]))


@dataclass(frozen=True)
class Vehicle:
    track: int
    cls: str
    lane_y: float
    direction: int
    x0: float
    speed: float

    def box(self, t: float, terrain: Terrain, heights: ClassHeightTable) -> Box3D:
        length, width = CLASS_SIZES[self.cls]
        h = heights[self.cls]
        x = self.x0 + self.direction * self.speed * t
        alt = terrain.altitude(x, self.lane_y)
        yaw = 0.0 if self.direction > 0 else math.pi
        v = (self.direction * self.speed, 0.0)
        attr = "moving" if self.speed > 0.5 else "stopped"
        return Box3D((x, self.lane_y, alt + h / 2), (length, width, h), yaw, self.cls, self.track, v, attr)


def _inside(box: Box3D, cub: PerceptionCuboid) -> bool:
    x, y, z = box.center
    hl = abs(math.cos(box.yaw)) * box.length / 2 + abs(math.sin(box.yaw)) * box.width / 2
    hw = abs(math.sin(box.yaw)) * box.length / 2 + abs(math.cos(box.yaw)) * box.width / 2
    return (cub.x_range[0] <= x - hl and x + hl <= cub.x_range[1]
            and cub.y_range[0] <= y - hw and y + hw <= cub.y_range[1]
            and cub.z_range[0] <= z - box.height / 2 and z + box.height / 2 <= cub.z_range[1])


def spawn_vehicles(cfg: SynthConfig, rng: np.random.Generator) -> list[Vehicle]:
    lo, hi = cfg.vehicles
    n = int(round(rng.integers(lo, hi + 1) * (1 + 4 * cfg.congestion)))
    lanes = lane_centers(cfg)
    duration = (cfg.clip_length - 1) / cfg.rate
    x0, x1 = cfg.cuboid.x_range
    mix = np.asarray(cfg.class_mix, dtype=float)
    per_lane = np.bincount(rng.integers(0, len(lanes), n), minlength=len(lanes))
    vehicles = []
    for (y, direction), count in zip(lanes, per_lane):
        speed = rng.uniform(*cfg.speed_range) * (1 - 0.8 * cfg.congestion)
        travel = speed * duration
        classes = rng.choice(len(VEHICLE_CLASSES), size=count, p=mix / mix.sum())
        # positions measured along the driving direction, starting upstream
        starts = np.sort(rng.uniform(0, (x1 - x0) + travel, size=count))
        jitter = rng.uniform(-0.3, 0.3, size=count)
        last_front = -np.inf
        for s, c, dy in zip(starts, classes, jitter):
            cls = VEHICLE_CLASSES[c]
            length = CLASS_SIZES[cls][0]
            s = max(s, last_front + 2.0 + length / 2)
            last_front = s + length / 2
            along = x0 - travel + s if direction > 0 else x1 + travel - s
            vehicles.append(Vehicle(0, cls, y + dy, direction, along, speed))
    return [replace(v, track=i) for i, v in enumerate(vehicles)]


def ground_offset(box: Box3D, nadir=(0.0, 0.0)) -> float:
    """Ground distance from the UAV nadir to the nearest point of the box footprint
    measured along the box's length axis."""
    along = abs((box.center[0] - nadir[0]) * math.cos(box.yaw) + (box.center[1] - nadir[1]) * math.sin(box.yaw))
    return max(0.0, along - box.length / 2)


@dataclass
class SynthClip:
    scene: SceneConfig
    clip: Clip
    uav_records: list[UavRecord]
    uav_to_world: Homography
    vehicles: list[Vehicle]

    def observations(self, index: int, scene: SceneConfig | None = None):
        """Per-camera projections of sample ``index`` (``project_annotations`` output)."""
        return pipeline.project_annotations(scene or self.scene, self.clip.samples[index])

    def camera_stream(self, time_shift: float = 0.0, scene: SceneConfig | None = None,
                      cameras: list[str] | None = None):
        """Axis-aligned image boxes per camera, stamped with sample time + ``time_shift``."""
        scene = scene or self.scene
        out = {}
        for cam in scene.cameras:
            if cameras is not None and cam.id not in cameras:
                continue
            frames = []
            for s in self.clip.samples:
                rects = []
                for box in s.boxes:
                    p = pipeline.project_box(cam, box)
                    if p is not None:
                        rects.append(pipeline.image_bounding_rect(p.polygon))
                frames.append((s.timestamp + time_shift, rects))
            out[cam.id] = frames
        return out


def generate_clip(scene: SceneConfig, cfg: SynthConfig, clip_id: str | int = 0) -> SynthClip:
    """Ground-truth clip, matching UAV-plane records and the UAV homography."""
    stream = int(clip_id) if str(clip_id).isdigit() else zlib.crc32(str(clip_id).encode())
    rng = _rng(cfg, 1, stream)
    vehicles = spawn_vehicles(cfg, rng)
    world_to_uav = uav_world_to_image(cfg)
    heights = scene.class_heights
    samples, records = [], []
    for k in range(cfg.clip_length):
        t = k / cfg.rate
        boxes = []
        for v in vehicles:
            x = v.x0 + v.direction * v.speed * t
            half = CLASS_SIZES[v.cls][0] / 2
            if not scene.cuboid.x_range[0] <= x - half <= x + half <= scene.cuboid.x_range[1]:
                continue
            box = v.box(t, scene.terrain, heights)
            if not _inside(box, scene.cuboid):
                continue
            boxes.append(box)
            footprint = RotatedRect2D(box.center[:2], box.length, box.width, box.yaw, "world")
            offset = None
            if cfg.uav_perspective:
                offset = ground_offset(box)
                h, H = box.height, cfg.uav_height
                observed = (box.length + offset) * H / (H - h) - offset
                footprint = replace(footprint, length=observed)
            rect, _ = pipeline.map_rect(world_to_uav, footprint, "uav")
            records.append(UavRecord(t, v.track, v.cls, rect, str(clip_id), offset))
        samples.append(Sample(t, boxes))
    clip = Clip(str(clip_id), samples, cfg.rate, scene.id)
    return SynthClip(scene, clip, records, world_to_uav.inverse(), vehicles)


def visible(camera: CameraModel, point) -> bool:
    """Frustum test: in front of the camera and inside the image."""
    uv = camgeo.project_world_to_image(camera, point)
    return uv is not None and 0 <= uv[0] <= camera.width and 0 <= uv[1] <= camera.height
