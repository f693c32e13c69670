"""Pinhole projection, camera rays and planar homographies.

No lens distortion is modeled. Points whose camera-frame depth is at or
below ``NEAR_PLANE`` are treated as behind the camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import CameraModel, DataError, PerceptionCuboid

NEAR_PLANE = 1e-6


class PointAtInfinity(DataError):
    pass


def world_to_camera(camera: CameraModel, points) -> np.ndarray:
    """Transform world points (..., 3) into the camera frame."""
    p = np.asarray(points, dtype=float)
    return (p - camera.t) @ camera.R


def camera_to_world(camera: CameraModel, points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return p @ camera.R.T + camera.t


def project_points(camera: CameraModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns ``(pixels, valid)`` where ``pixels`` has shape (N, 2) and rows
    with ``valid == False`` (behind the near plane) are NaN.
    """
    pc = world_to_camera(camera, np.atleast_2d(points))
    z = pc[:, 2]
    valid = z > NEAR_PLANE
    uv = np.full((len(pc), 2), np.nan)
    zv = z[valid]
    uv[valid, 0] = camera.fx * pc[valid, 0] / zv + camera.cx
    uv[valid, 1] = camera.fy * pc[valid, 1] / zv + camera.cy
    return uv, valid


def project_world_to_image(camera: CameraModel, point) -> np.ndarray | None:
    """Pixel (u, v) of a world point, or None when it is behind the camera.

    The pixel may fall outside the image; callers clip.
    """
    uv, valid = project_points(camera, point)
    return uv[0] if valid[0] else None


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        d = d / np.linalg.norm(d)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "direction", tuple(float(v) for v in d))

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.asarray(self.origin) + t[..., None] * np.asarray(self.direction)


def pixel_ray(camera: CameraModel, pixel) -> Ray:
    u, v = pixel
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    return Ray(camera.translation, camera.R @ d_cam)


def lift_pixel_with_depth(camera: CameraModel, pixel, depth: float) -> np.ndarray:
    """World point on the pixel's ray whose camera-frame z equals ``depth``."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = pixel
    pc = depth * np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    return camera.R @ pc + camera.t


def ray_box_interval(ray: Ray, lower, upper) -> tuple[float, float] | None:
    """Slab-method intersection of a ray (t >= 0) with an axis-aligned box.

    A grazing contact counts as a hit with entry == exit.
    """
    o = np.asarray(ray.origin)
    d = np.asarray(ray.direction)
    t_lo, t_hi = 0.0, math.inf
    for k in range(3):
        if d[k] == 0.0:
            if not lower[k] <= o[k] <= upper[k]:
                return None
            continue
        t1 = (lower[k] - o[k]) / d[k]
        t2 = (upper[k] - o[k]) / d[k]
        if t1 > t2:
            t1, t2 = t2, t1
        t_lo = max(t_lo, t1)
        t_hi = min(t_hi, t2)
        if t_lo > t_hi:
            return None
    return t_lo, t_hi


def sample_ray_points(camera: CameraModel, pixel, count: int,
                      cuboid: PerceptionCuboid | None = None) -> np.ndarray:
    """``count`` points spaced uniformly along the pixel ray inside the cuboid.

    With ``count >= 2`` the first and last points are the cuboid entry and
    exit. A single point is placed at the middle of the interval. Returns an
    empty (0, 3) array when the ray misses the cuboid.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    cuboid = cuboid or PerceptionCuboid()
    ray = pixel_ray(camera, pixel)
    hit = ray_box_interval(ray, cuboid.lower, cuboid.upper)
    if hit is None:
        return np.empty((0, 3))
    t0, t1 = hit
    # keep the entry strictly in front of the camera so it stays projectable
    axis_cos = float(np.dot(ray.direction, camera.R[:, 2]))
    t0 = max(t0, 2 * NEAR_PLANE / axis_cos)
    if t0 > t1:
        return np.empty((0, 3))
    ts = np.array([(t0 + t1) / 2]) if count == 1 else np.linspace(t0, t1, count)
    return ray.at(ts)


@dataclass(frozen=True)
class Homography:
    """3x3 planar projective map stored row-major, scaled so h33 == 1 when possible."""

    matrix: tuple[float, ...]

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise DataError("homography has non-finite entries")
        if abs(m[2, 2]) > 1e-12 * np.abs(m).max():
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-14 * np.abs(m).max() ** 3:
            raise DataError("homography is singular")
        object.__setattr__(self, "matrix", tuple(float(v) for v in m.ravel()))

    @property
    def H(self) -> np.ndarray:
        return np.array(self.matrix).reshape(3, 3)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.H @ other.H)

    def apply(self, points) -> np.ndarray:
        return apply_homography(self, points)


def apply_homography(H, points) -> np.ndarray:
    """Map 2D point(s) through H. Accepts a single (2,) point or an (N, 2) array."""
    m = H.H if isinstance(H, Homography) else np.asarray(H, dtype=float)
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    w = m[2, 0] * p[:, 0] + m[2, 1] * p[:, 1] + m[2, 2]
    if np.any(np.abs(w) <= 1e-300):
        raise PointAtInfinity("point maps to infinity under the homography")
    x = (m[0, 0] * p[:, 0] + m[0, 1] * p[:, 1] + m[0, 2]) / w
    y = (m[1, 0] * p[:, 0] + m[1, 1] * p[:, 1] + m[1, 2]) / w
    out = np.stack([x, y], axis=1)
    return out[0] if single else out


def rotation_from_axis_angle(omega) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        return np.eye(3) + k + 0.5 * k @ k
    a = w / theta
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * (k @ k)


def orthonormalize(r) -> np.ndarray:
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=float))
    m = u @ vt
    if np.linalg.det(m) < 0:
        u[:, -1] *= -1
        m = u @ vt
    return m


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``position`` facing ``target``
    (KITTI axes: x right, y down, z forward)."""
    z = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)
