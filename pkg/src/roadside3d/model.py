"""Domain types and file formats shared by every other module.

All world quantities are double precision meters in a right-handed frame
with +Z up. Yaw is counterclockwise from +X seen from +Z, and a box's length
axis points along its yaw. Cameras follow the KITTI convention: x right,
y down, z forward along the optical axis.

Values are frozen dataclasses holding tuples, so they are hashable, compare
bit-exactly and can be shared between threads or processes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from typing import Any, Iterable, Sequence

import numpy as np

VEHICLE_CLASSES = ("car", "van", "bus", "truck")
DEFAULT_CUBOID = ((-400.0, 400.0), (-40.0, 40.0), (0.0, 6.0))
ROTATION_TOL = 1e-9


class DataError(ValueError):
    """Malformed input data (parse failures, bad records)."""


class InvariantError(DataError):
    """A value violates a type invariant; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]. Idempotent."""
    r = math.remainder(float(angle), 2.0 * math.pi)
    return math.pi if r <= -math.pi else r


def _vec(values: Any, n: int, path: str) -> tuple[float, ...]:
    try:
        out = tuple(float(v) for v in np.asarray(values, dtype=float).ravel())
    except (TypeError, ValueError) as exc:
        raise InvariantError(path, f"expected {n} numbers") from exc
    if len(out) != n:
        raise InvariantError(path, f"expected {n} numbers, got {len(out)}")
    if not all(math.isfinite(v) for v in out):
        raise InvariantError(path, "non-finite value")
    return out


def _range(values: Any, path: str) -> tuple[float, float]:
    lo, hi = _vec(values, 2, path)
    if not lo < hi:
        raise InvariantError(path, f"range must satisfy lo < hi, got ({lo}, {hi})")
    return lo, hi


@dataclass(frozen=True)
class PerceptionCuboid:
    x_range: tuple[float, float] = DEFAULT_CUBOID[0]
    y_range: tuple[float, float] = DEFAULT_CUBOID[1]
    z_range: tuple[float, float] = DEFAULT_CUBOID[2]

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            object.__setattr__(self, name, _range(getattr(self, name), name))

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    def contains(self, point, tol: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))


def quaternion_to_matrix(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion; the input is normalized."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``rotation`` maps camera axes to world axes (row-major 3x3)
    and ``translation`` is the camera center in world coordinates."""

    id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: tuple[float, ...]
    translation: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        for name in ("width", "height"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise InvariantError(name, f"must be a positive integer, got {value}")
            object.__setattr__(self, name, int(value))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise InvariantError("fx", "focal lengths must be positive")
        if not 0 < self.cx < self.width:
            raise InvariantError("cx", f"principal point must lie inside (0, {self.width})")
        if not 0 < self.cy < self.height:
            raise InvariantError("cy", f"principal point must lie inside (0, {self.height})")
        rot = _vec(self.rotation, 9, "rotation")
        r = np.array(rot).reshape(3, 3)
        if np.max(np.abs(r.T @ r - np.eye(3))) > ROTATION_TOL:
            raise InvariantError("rotation", "matrix is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise InvariantError("rotation", "determinant must be +1 (reflections are not rotations)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", _vec(self.translation, 3, "translation"))

    @cached_property
    def R(self) -> np.ndarray:
        r = np.array(self.rotation).reshape(3, 3)
        r.flags.writeable = False
        return r

    @cached_property
    def t(self) -> np.ndarray:
        t = np.array(self.translation)
        t.flags.writeable = False
        return t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def optical_axis(self) -> np.ndarray:
        return self.R[:, 2].copy()

    def with_pose(self, rotation, translation) -> "CameraModel":
        return replace(self, rotation=np.asarray(rotation).ravel(), translation=translation)


@dataclass(frozen=True)
class Box3D:
    """World-frame oriented vehicle box. ``size`` is (length, width, height).

    ``velocity`` (vx, vy in m/s) and ``attribute`` are optional extras used
    only by the velocity/attribute error terms of the detection score.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    cls: str
    track: Any = None
    velocity: tuple[float, float] | None = None
    attribute: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center, 3, "center"))
        size = _vec(self.size, 3, "size")
        if min(size) <= 0:
            raise InvariantError("size", f"dimensions must be positive, got {size}")
        object.__setattr__(self, "size", size)
        if not math.isfinite(float(self.yaw)):
            raise InvariantError("yaw", "non-finite value")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))
        if self.cls not in VEHICLE_CLASSES:
            raise InvariantError("class", f"unknown class {self.cls!r}; expected one of {VEHICLE_CLASSES}")
        if self.velocity is not None:
            object.__setattr__(self, "velocity", _vec(self.velocity, 2, "velocity"))

    @property
    def length(self) -> float:
        return self.size[0]

    @property
    def width(self) -> float:
        return self.size[1]

    @property
    def height(self) -> float:
        return self.size[2]

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]


@dataclass(frozen=True)
class Detection(Box3D):
    score: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise InvariantError("score", f"must lie in [0, 1], got {score}")
        object.__setattr__(self, "score", score)

    @classmethod
    def from_box(cls, box: Box3D, score: float = 1.0) -> "Detection":
        values = {f.name: getattr(box, f.name) for f in fields(Box3D)}
        return cls(**values, score=score)


FRAMES = ("uav", "world", "image")


@dataclass(frozen=True)
class RotatedRect2D:
    """Oriented rectangle. ``frame`` tags the unit: UAV pixels, world meters
    on the ground plane, or camera image pixels."""

    center: tuple[float, float]
    length: float
    width: float
    angle: float
    frame: str = "world"

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center, 2, "center"))
        for name in ("length", "width", "angle"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.length > 0 and self.width > 0):
            raise InvariantError("length", "length and width must be positive")
        if self.frame not in FRAMES:
            raise InvariantError("frame", f"unknown frame {self.frame!r}")

    def corners(self) -> np.ndarray:
        """Corners in the same order as the box footprint: (+l,+w), (-l,+w), (-l,-w), (+l,-w)."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        local = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)
        local *= [self.length / 2, self.width / 2]
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center)


@dataclass(frozen=True)
class TrajectoryPoint:
    timestamp: float
    box: Any  # Box3D or RotatedRect2D
    interpolated: bool = False


@dataclass(frozen=True)
class Trajectory:
    track: Any
    cls: str
    points: tuple[TrajectoryPoint, ...]

    def __post_init__(self):
        pts = tuple(self.points)
        ts = [p.timestamp for p in pts]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvariantError("points", "timestamps must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def duration(self) -> float:
        return self.points[-1].timestamp - self.points[0].timestamp if self.points else 0.0


@dataclass(frozen=True)
class Sample:
    timestamp: float
    boxes: tuple[Box3D, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class Clip:
    id: str
    samples: tuple[Sample, ...]
    rate: float = 2.0
    scene: str = ""

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.rate <= 0:
            raise InvariantError("rate", "must be positive")
        ts = [s.timestamp for s in self.samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvariantError(f"clip[{self.id}].samples", "timestamps must be strictly increasing")


@dataclass(frozen=True)
class Terrain:
    """Heightmap stand-in for the scene reconstruction.

    ``grid[row][col]`` is the altitude at
    ``(origin[0] + col * cell_size, origin[1] + row * cell_size)``.
    """

    origin: tuple[float, float]
    cell_size: float
    grid: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec(self.origin, 2, "terrain.origin"))
        object.__setattr__(self, "cell_size", float(self.cell_size))
        if not self.cell_size > 0:
            raise InvariantError("terrain.cell_size", "must be positive")
        rows = [tuple(float(v) for v in row) for row in self.grid]
        if not rows or not rows[0] or any(len(r) != len(rows[0]) for r in rows):
            raise InvariantError("terrain.grid", "must be a non-empty rectangular array")
        object.__setattr__(self, "grid", tuple(rows))

    @cached_property
    def array(self) -> np.ndarray:
        a = np.array(self.grid)
        a.flags.writeable = False
        return a

    @property
    def extent(self) -> tuple[tuple[float, float], tuple[float, float]]:
        nrow, ncol = self.array.shape
        x0, y0 = self.origin
        return (x0, x0 + (ncol - 1) * self.cell_size), (y0, y0 + (nrow - 1) * self.cell_size)

    def altitude(self, x: float, y: float) -> float:
        """Bilinear interpolation of the grid at (x, y)."""
        (xlo, xhi), (ylo, yhi) = self.extent
        if not (xlo <= x <= xhi and ylo <= y <= yhi):
            raise InvariantError("terrain", f"point ({x}, {y}) lies outside the terrain grid")
        a = self.array
        fx = (x - xlo) / self.cell_size
        fy = (y - ylo) / self.cell_size
        c0 = min(int(math.floor(fx)), max(a.shape[1] - 2, 0))
        r0 = min(int(math.floor(fy)), max(a.shape[0] - 2, 0))
        c1 = min(c0 + 1, a.shape[1] - 1)
        r1 = min(r0 + 1, a.shape[0] - 1)
        tx, ty = fx - c0, fy - r0
        top = a[r0, c0] * (1 - tx) + a[r0, c1] * tx
        bottom = a[r1, c0] * (1 - tx) + a[r1, c1] * tx
        return float(top * (1 - ty) + bottom * ty)

    @classmethod
    def flat(cls, x_range, y_range, altitude: float = 0.0, cell_size: float = 10.0) -> "Terrain":
        ncol = int(math.ceil((x_range[1] - x_range[0]) / cell_size)) + 1
        nrow = int(math.ceil((y_range[1] - y_range[0]) / cell_size)) + 1
        return cls((x_range[0], y_range[0]), cell_size, [[altitude] * ncol for _ in range(nrow)])


@dataclass(frozen=True)
class ClassHeightTable:
    heights: tuple[tuple[str, float], ...]

    def __post_init__(self):
        items = dict(self.heights)
        missing = [c for c in VEHICLE_CLASSES if c not in items]
        if missing:
            raise InvariantError("class_heights", f"missing classes {missing}")
        extra = [c for c in items if c not in VEHICLE_CLASSES]
        if extra:
            raise InvariantError("class_heights", f"unknown classes {extra}")
        for c in VEHICLE_CLASSES:
            if not float(items[c]) > 0:
                raise InvariantError(f"class_heights.{c}", "height must be positive")
        object.__setattr__(self, "heights", tuple((c, float(items[c])) for c in VEHICLE_CLASSES))

    def __getitem__(self, cls: str) -> float:
        return dict(self.heights)[cls]

    @classmethod
    def from_mapping(cls, mapping) -> "ClassHeightTable":
        return cls(tuple(dict(mapping).items()))

    def as_dict(self) -> dict[str, float]:
        return dict(self.heights)


@dataclass(frozen=True)
class SceneConfig:
    id: str
    cameras: tuple[CameraModel, ...]
    terrain: Terrain
    class_heights: ClassHeightTable
    cuboid: PerceptionCuboid = field(default_factory=PerceptionCuboid)

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise InvariantError("cameras", "camera ids must be unique")

    def camera(self, camera_id: str) -> CameraModel:
        for cam in self.cameras:
            if cam.id == camera_id:
                return cam
        raise KeyError(camera_id)


# ---------------------------------------------------------------------------
# scene.json


def scene_to_dict(scene: SceneConfig) -> dict:
    return {
        "id": scene.id,
        "cuboid": {"x": list(scene.cuboid.x_range), "y": list(scene.cuboid.y_range),
                   "z": list(scene.cuboid.z_range)},
        "cameras": [camera_to_dict(c) for c in scene.cameras],
        "terrain": {"origin": list(scene.terrain.origin), "cell_size": scene.terrain.cell_size,
                    "grid": [list(r) for r in scene.terrain.grid]},
        "class_heights": scene.class_heights.as_dict(),
    }


def camera_to_dict(cam: CameraModel) -> dict:
    return {"id": cam.id, "width": cam.width, "height": cam.height, "fx": cam.fx, "fy": cam.fy,
            "cx": cam.cx, "cy": cam.cy, "rotation": list(cam.rotation),
            "translation": list(cam.translation)}


def camera_from_dict(d: dict, path: str = "camera") -> CameraModel:
    try:
        rot = d["rotation"]
        if len(rot) == 4:
            rot = quaternion_to_matrix(rot).ravel()
        return CameraModel(d["id"], d["width"], d["height"], d["fx"], d["fy"], d["cx"], d["cy"],
                           rot, d["translation"])
    except InvariantError as exc:
        raise InvariantError(f"{path}.{exc.path}", str(exc).split(": ", 1)[-1]) from None
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: missing or malformed field {exc}") from None


def _prefixed(prefix: str, fn, *args):
    try:
        return fn(*args)
    except InvariantError as exc:
        raise InvariantError(f"{prefix}.{exc.path}" if not exc.path.startswith(prefix) else exc.path,
                             str(exc).split(": ", 1)[-1]) from None


def scene_from_dict(d: dict) -> SceneConfig:
    try:
        cub = d.get("cuboid") or {}
        cuboid = _prefixed("cuboid", PerceptionCuboid, cub.get("x", DEFAULT_CUBOID[0]),
                           cub.get("y", DEFAULT_CUBOID[1]), cub.get("z", DEFAULT_CUBOID[2]))
        cams = [camera_from_dict(c, f"cameras[{i}]") for i, c in enumerate(d["cameras"])]
        t = d["terrain"]
        terrain = Terrain(t["origin"], t["cell_size"], t["grid"])
        if "class_heights" not in d:
            raise InvariantError("class_heights", "required (no default heights are shipped)")
        heights = ClassHeightTable.from_mapping(d["class_heights"])
        return SceneConfig(str(d["id"]), cams, terrain, heights, cuboid)
    except (KeyError, TypeError, AttributeError) as exc:
        raise DataError(f"scene: missing or malformed field {exc}") from None


def load_scene(path) -> SceneConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return scene_from_dict(data)


def save_scene(scene: SceneConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# annotations.jsonl / detections.jsonl


def box_to_record(box: Box3D) -> dict:
    rec = {"track": box.track, "class": box.cls, "center": list(box.center),
           "size": list(box.size), "yaw": box.yaw}
    if box.velocity is not None:
        rec["velocity"] = list(box.velocity)
    if box.attribute is not None:
        rec["attribute"] = box.attribute
    if isinstance(box, Detection):
        rec["score"] = box.score
    return rec


def box_from_record(rec: dict, detection: bool | None = None) -> Box3D:
    if detection is None:
        detection = "score" in rec
    kwargs = dict(center=rec["center"], size=rec["size"], yaw=rec["yaw"], cls=rec["class"],
                  track=rec.get("track"), velocity=rec.get("velocity"),
                  attribute=rec.get("attribute"))
    if detection:
        return Detection(**kwargs, score=rec.get("score", 1.0))
    return Box3D(**kwargs)


def clips_to_records(clips: Iterable[Clip]) -> list[dict]:
    """Flatten clips into per-box records.

    A sample without boxes is written as a bare ``{clip, sample, timestamp}``
    marker so that it survives the round trip.
    """
    out = []
    for clip in clips:
        for idx, sample in enumerate(clip.samples):
            head = {"clip": clip.id, "sample": idx, "timestamp": sample.timestamp}
            if clip.scene:
                head["scene"] = clip.scene
            if not sample.boxes:
                out.append(dict(head))
            for box in sample.boxes:
                out.append({**head, **box_to_record(box)})
    return out


def clips_from_records(records: Iterable[dict], rate: float | None = None,
                       detection: bool | None = None) -> list[Clip]:
    grouped: dict[str, dict[int, tuple[float, list]]] = {}
    scenes: dict[str, str] = {}
    for lineno, rec in enumerate(records, 1):
        try:
            clip_id = str(rec["clip"])
            idx = int(rec["sample"])
            ts = float(rec["timestamp"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"record {lineno}: missing or malformed field {exc}") from None
        scenes.setdefault(clip_id, str(rec.get("scene", "")))
        samples = grouped.setdefault(clip_id, {})
        if idx in samples and samples[idx][0] != ts:
            raise DataError(f"record {lineno}: sample {idx} of clip {clip_id} has conflicting timestamps")
        entry = samples.setdefault(idx, (ts, []))
        if "class" in rec:
            try:
                entry[1].append(box_from_record(rec, detection))
            except InvariantError as exc:
                raise InvariantError(f"record {lineno}.{exc.path}", str(exc).split(": ", 1)[-1]) from None
            except KeyError as exc:
                raise DataError(f"record {lineno}: missing field {exc}") from None
    clips = []
    for clip_id, samples in grouped.items():
        ordered = [samples[k] for k in sorted(samples)]
        ts = [t for t, _ in ordered]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError(f"clip {clip_id}: timestamps are not monotone in sample order")
        clip_rate = rate
        if clip_rate is None:
            clip_rate = 1.0 / (ts[1] - ts[0]) if len(ts) > 1 else 2.0
        clips.append(Clip(clip_id, [Sample(t, boxes) for t, boxes in ordered], clip_rate,
                          scenes[clip_id]))
    return clips


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
    return out


def write_jsonl(records: Iterable[dict], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False))
            fh.write("\n")
    os.replace(tmp, path)


def load_annotations(path, rate: float | None = None) -> list[Clip]:
    return clips_from_records(read_jsonl(path), rate)


def save_annotations(clips: Iterable[Clip], path) -> None:
    write_jsonl(clips_to_records(clips), path)


def load_detections(path, rate: float | None = None) -> list[Clip]:
    return clips_from_records(read_jsonl(path), rate, detection=True)
