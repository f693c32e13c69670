"""Exact 2D polygon computations and oriented box overlaps.

Everything works in double precision with a 1e-12 degeneracy epsilon. The
union of convex polygons is computed with a vertical slab decomposition:
inside a slab bounded by consecutive vertex or edge-crossing abscissae the
covered length is linear in x, so a midpoint evaluation integrates it
exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import camgeo
from .model import Box3D, CameraModel, DataError, RotatedRect2D

EPS = 1e-12


class GeometryError(DataError):
    pass


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


class Polygon2D:
    """Simple polygon with counterclockwise vertices (an (N, 2) read-only array)."""

    __slots__ = ("vertices",)

    def __init__(self, vertices, *, check_simple: bool = True):
        v = np.array(vertices, dtype=float).reshape(-1, 2)
        if len(v) < 3:
            raise GeometryError("polygon needs at least 3 vertices")
        if not np.all(np.isfinite(v)):
            raise GeometryError("polygon has non-finite vertices")
        if _signed_area(v) <= 0:
            raise GeometryError("polygon must be counterclockwise with positive area")
        if check_simple and len(v) > 3:
            n = len(v)
            for i in range(n):
                for j in range(i + 2, n):
                    if i == 0 and j == n - 1:
                        continue
                    if _segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                        raise GeometryError("polygon is self-intersecting")
        v.flags.writeable = False
        self.vertices = v

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"Polygon2D({self.vertices.tolist()!r})"

    def __eq__(self, other):
        return isinstance(other, Polygon2D) and np.array_equal(self.vertices, other.vertices)

    __hash__ = None

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)

    def is_convex(self, tol: float = EPS) -> bool:
        return _is_convex(self.vertices, tol)

    def bounds(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def transformed(self, rotation: float = 0.0, offset=(0.0, 0.0)) -> "Polygon2D":
        c, s = math.cos(rotation), math.sin(rotation)
        v = self.vertices @ np.array([[c, s], [-s, c]]) + np.asarray(offset, dtype=float)
        return Polygon2D(v, check_simple=False)


def _is_convex(v: np.ndarray, tol: float = EPS) -> bool:
    e = np.roll(v, -1, axis=0) - v
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    scale = max(float(np.abs(v).max()), 1.0) ** 2
    return bool(np.all(cross >= -tol * scale))


def polygon_area(p: Polygon2D) -> float:
    """Shoelace area."""
    return p.area


def convex_hull(points) -> Polygon2D:
    """Andrew's monotone chain; collinear boundary points are dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).reshape(-1, 2).tolist())))
    if len(pts) < 3:
        raise GeometryError("convex hull needs at least 3 distinct points")
    scale = max(max(abs(c) for p in pts for c in p), 1.0) ** 2

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= EPS * scale:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= EPS * scale:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise GeometryError("points are collinear")
    v = np.array(hull)
    if _signed_area(v) <= EPS * scale:
        raise GeometryError("points are collinear")
    return Polygon2D(v, check_simple=False)


def _clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip ``subject`` by the convex CCW ``clipper``."""
    out = subject
    n = len(clipper)
    for i in range(n):
        if len(out) == 0:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        side = ex * (out[:, 1] - ay) - ey * (out[:, 0] - ax)
        inside = side >= 0
        if inside.all():
            continue
        if not inside.any():
            return np.empty((0, 2))
        nxt_side = np.roll(side, -1)
        nxt = np.roll(out, -1, axis=0)
        pts = []
        for k in range(len(out)):
            if inside[k]:
                pts.append(out[k])
            if inside[k] != (nxt_side[k] >= 0):
                t = side[k] / (side[k] - nxt_side[k])
                pts.append(out[k] + t * (nxt[k] - out[k]))
        out = np.array(pts) if pts else np.empty((0, 2))
    return out


def _dedupe(v: np.ndarray) -> np.ndarray:
    if len(v) == 0:
        return v
    scale = max(float(np.abs(v).max()), 1.0)
    keep = np.linalg.norm(v - np.roll(v, 1, axis=0), axis=1) > EPS * scale
    if not keep.any():
        return v[:1]
    return v[keep]


def _intersect_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray | None:
    if (a[:, 0].max() < b[:, 0].min() or b[:, 0].max() < a[:, 0].min()
            or a[:, 1].max() < b[:, 1].min() or b[:, 1].max() < a[:, 1].min()):
        return None
    v = _dedupe(_clip_convex(a, b))
    if len(v) < 3 or _signed_area(v) < EPS:
        return None
    return v


def convex_intersect(a: Polygon2D, b: Polygon2D) -> Polygon2D | None:
    """Intersection of two convex polygons, None when its area is below 1e-12."""
    if not a.is_convex() or not b.is_convex():
        raise GeometryError("convex_intersect requires convex polygons")
    v = _intersect_arrays(a.vertices, b.vertices)
    return None if v is None else Polygon2D(v, check_simple=False)


def _edge_crossings_x(edges: np.ndarray, owner: np.ndarray) -> np.ndarray:
    """x coordinates where edges of different polygons properly cross."""
    p = edges[:, 0]
    r = edges[:, 1] - edges[:, 0]
    # pairwise solve p_i + t r_i = p_j + u r_j
    rxs = r[:, None, 0] * r[None, :, 1] - r[:, None, 1] * r[None, :, 0]
    qp = p[None, :, :] - p[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * r[None, :, 1] - qp[..., 1] * r[None, :, 0]) / rxs
        u = (qp[..., 0] * r[:, None, 1] - qp[..., 1] * r[:, None, 0]) / rxs
    ok = (owner[:, None] != owner[None, :]) & (np.abs(rxs) > 0)
    ok &= (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    i, _ = np.nonzero(np.triu(ok))
    tt = t[np.triu(ok)]
    return p[i, 0] + tt * r[i, 0]


def _union_area_arrays(polys: Sequence[np.ndarray]) -> float:
    polys = [p for p in polys if p is not None and len(p) >= 3]
    if not polys:
        return 0.0
    if len(polys) == 1:
        return _signed_area(polys[0])
    edges, owner = [], []
    for k, v in enumerate(polys):
        edges.append(np.stack([v, np.roll(v, -1, axis=0)], axis=1))
        owner.append(np.full(len(v), k))
    edges = np.concatenate(edges)
    owner = np.concatenate(owner)
    xs = np.concatenate([edges[:, 0, 0], _edge_crossings_x(edges, owner)])
    xs = np.unique(xs)
    if len(xs) < 2:
        return 0.0
    widths = np.diff(xs)
    mid = (xs[:-1] + xs[1:]) / 2

    # per-polygon interval [lo, hi] at every slab midpoint
    x0, y0 = edges[:, 0, 0], edges[:, 0, 1]
    x1, y1 = edges[:, 1, 0], edges[:, 1, 1]
    spans = x0 != x1
    with np.errstate(divide="ignore", invalid="ignore"):
        tt = (mid[None, :] - x0[:, None]) / (x1 - x0)[:, None]
    hit = spans[:, None] & (tt >= 0) & (tt <= 1)
    y = y0[:, None] + tt * (y1 - y0)[:, None]
    lo = np.full((len(polys), len(mid)), np.inf)
    hi = np.full((len(polys), len(mid)), -np.inf)
    np.minimum.at(lo, owner, np.where(hit, y, np.inf))
    np.maximum.at(hi, owner, np.where(hit, y, -np.inf))

    order = np.argsort(lo, axis=0)
    lo = np.take_along_axis(lo, order, axis=0)
    hi = np.take_along_axis(hi, order, axis=0)
    reach = np.maximum.accumulate(hi, axis=0)
    prev = np.vstack([np.full((1, len(mid)), -np.inf), reach[:-1]])
    with np.errstate(invalid="ignore"):
        gain = hi - np.maximum(lo, prev)
    gain = np.where(np.isfinite(gain) & (gain > 0), gain, 0.0)
    return float(np.dot(widths, gain.sum(axis=0)))


def union_area(polys: Sequence[Polygon2D]) -> float:
    """Exact area of the union of convex polygons (0 for an empty list)."""
    for p in polys:
        if not p.is_convex():
            raise GeometryError("union_area requires convex polygons")
    return _union_area_arrays([p.vertices for p in polys])


# ---------------------------------------------------------------------------
# boxes

_CORNER_SIGNS = np.array([
    [1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, -1],
    [1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1],
], dtype=float)


def box3d_corners(box: Box3D) -> np.ndarray:
    """The 8 corners (8, 3): bottom face 0-3 CCW from (+l/2, +w/2), top face 4-7 in the same order."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    local = _CORNER_SIGNS * (np.array(box.size) / 2)
    return local @ rot.T + np.array(box.center)


def box_footprint(box: Box3D) -> np.ndarray:
    return box3d_corners(box)[:4, :2]


@dataclass(frozen=True)
class ImagePolygon:
    polygon: Polygon2D
    partial: bool  # some corners were behind the near plane


_IMAGE_CCW = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def box3d_image_polygon(camera: CameraModel, box: Box3D, clip: bool = True) -> ImagePolygon | None:
    """Convex hull of the box's projected in-front corners, clipped to the image.

    Note that in pixel coordinates (y down) a counterclockwise vertex order
    is taken with respect to the usual x/y axes, which is what every polygon
    routine here assumes.
    """
    uv, valid = camgeo.project_points(camera, box3d_corners(box))
    if valid.sum() < 3:
        return None
    try:
        hull = convex_hull(uv[valid])
    except GeometryError:
        return None
    v = hull.vertices
    if clip:
        v = _intersect_arrays(v, _IMAGE_CCW * [camera.width, camera.height])
        if v is None:
            return None
    return ImagePolygon(Polygon2D(v, check_simple=False), partial=bool(not valid.all()))


def _rect_poly(r: RotatedRect2D) -> np.ndarray:
    v = r.corners()
    return v if _signed_area(v) > 0 else v[::-1].copy()


def rotated_rect_iou(a: RotatedRect2D, b: RotatedRect2D) -> float:
    if a.frame != b.frame:
        raise GeometryError(f"frame mismatch: {a.frame} vs {b.frame}")
    inter = _intersect_arrays(_rect_poly(a), _rect_poly(b))
    if inter is None:
        return 0.0
    ia = _signed_area(inter)
    union = a.length * a.width + b.length * b.width - ia
    return float(min(1.0, max(0.0, ia / union)))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Oriented 3D IoU: footprint intersection times vertical overlap."""
    za = (a.center[2] - a.height / 2, a.center[2] + a.height / 2)
    zb = (b.center[2] - b.height / 2, b.center[2] + b.height / 2)
    dz = min(za[1], zb[1]) - max(za[0], zb[0])
    if dz <= 0:
        return 0.0
    inter = _intersect_arrays(box_footprint(a), box_footprint(b))
    if inter is None:
        return 0.0
    iv = _signed_area(inter) * dz
    union = a.volume + b.volume - iv
    return float(min(1.0, max(0.0, iv / union)))
