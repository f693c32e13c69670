"""Homography and camera pose estimation from correspondences.

Pose refinement minimizes the summed squared reprojection error with
Levenberg-Marquardt. The rotation is updated by an axis-angle increment
composed on the right of the current camera-to-world rotation, the camera
center additively, and (optionally) a single zoom factor scales fx and fy
together. The principal point stays fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import camgeo
from .camgeo import Homography
from .model import CameraModel, DataError

log = logging.getLogger(__name__)


class CalibrationError(DataError):
    pass


@dataclass(frozen=True)
class Correspondence2D3D:
    world: tuple[float, float, float]
    pixel: tuple[float, float]


@dataclass(frozen=True)
class CorrespondencePair2D:
    source: tuple[float, float]
    target: tuple[float, float]


def _hartley(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    mean = pts.mean(axis=0)
    dist = np.linalg.norm(pts - mean, axis=1).mean()
    if dist <= 0:
        raise CalibrationError("degenerate configuration: all points coincide")
    s = np.sqrt(2) / dist
    return np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1]])


def _collinear(a, b, c, tol) -> bool:
    return abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) <= tol


def estimate_homography(pairs: Sequence[CorrespondencePair2D] | np.ndarray,
                        target=None) -> Homography:
    """Normalized DLT.

    Accepts either a sequence of ``CorrespondencePair2D`` or two (N, 2)
    arrays ``(source, target)``.
    """
    if target is None:
        src = np.array([p.source for p in pairs], dtype=float)
        dst = np.array([p.target for p in pairs], dtype=float)
    else:
        src = np.asarray(pairs, dtype=float)
        dst = np.asarray(target, dtype=float)
    if len(src) < 4 or len(src) != len(dst):
        raise CalibrationError(f"need at least 4 correspondences, got {len(src)}")
    ts, td = _hartley(src), _hartley(dst)
    s = src @ ts[:2, :2].T + ts[:2, 2]
    d = dst @ td[:2, :2].T + td[:2, 2]
    if len(src) == 4:
        for i in range(4):
            tri = [s[j] for j in range(4) if j != i]
            if _collinear(*tri, tol=1e-10):
                raise CalibrationError("degenerate configuration: three source points are collinear")
    n = len(s)
    a = np.zeros((2 * n, 9))
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    a[0::2, 0:3] = np.stack([-x, -y, -np.ones(n)], axis=1)
    a[0::2, 6:9] = np.stack([u * x, u * y, u], axis=1)
    a[1::2, 3:6] = np.stack([-x, -y, -np.ones(n)], axis=1)
    a[1::2, 6:9] = np.stack([v * x, v * y, v], axis=1)
    _, sv, vt = np.linalg.svd(a)
    if sv[7] <= 1e-10 * sv[0]:
        raise CalibrationError("degenerate configuration: rank-deficient system")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    try:
        return Homography(h)
    except DataError as exc:
        raise CalibrationError(f"degenerate configuration: {exc}") from None


def transfer_error(H: Homography, source, target) -> np.ndarray:
    return np.linalg.norm(camgeo.apply_homography(H, np.asarray(source, dtype=float))
                          - np.asarray(target, dtype=float), axis=1)


def _as_arrays(corr) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(corr, tuple) and len(corr) == 2 and isinstance(corr[0], np.ndarray):
        return np.asarray(corr[0], dtype=float), np.asarray(corr[1], dtype=float)
    world = np.array([c.world for c in corr], dtype=float).reshape(-1, 3)
    pixel = np.array([c.pixel for c in corr], dtype=float).reshape(-1, 2)
    return world, pixel


def residuals(camera: CameraModel, corr) -> np.ndarray:
    """Stacked (u, v) residuals projected - observed, shape (2N,).

    Raises CalibrationError naming the first point behind the camera.
    """
    world, pixel = _as_arrays(corr)
    uv, valid = camgeo.project_points(camera, world)
    if not valid.all():
        idx = int(np.flatnonzero(~valid)[0])
        raise CalibrationError(f"correspondence {idx} lies behind the camera")
    return (uv - pixel).ravel()


def reprojection_rmse(camera: CameraModel, corr) -> float:
    world, _ = _as_arrays(corr)
    if len(world) == 0:
        raise CalibrationError("no correspondences")
    r = residuals(camera, corr).reshape(-1, 2)
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def apply_update(camera: CameraModel, delta, refine_focal: bool = False,
                 tie_focal: bool = True) -> CameraModel:
    """Camera after a parameter increment ``[omega(3), dt(3), zoom...]``."""
    delta = np.asarray(delta, dtype=float)
    rot = camgeo.orthonormalize(camera.R @ camgeo.rotation_from_axis_angle(delta[:3]))
    cam = replace(camera, rotation=rot.ravel(), translation=camera.t + delta[3:6])
    if refine_focal:
        if tie_focal:
            cam = replace(cam, fx=camera.fx * (1 + delta[6]), fy=camera.fy * (1 + delta[6]))
        else:
            cam = replace(cam, fx=camera.fx * (1 + delta[6]), fy=camera.fy * (1 + delta[7]))
    return cam


def reprojection_jacobian(camera: CameraModel, corr, refine_focal: bool = False,
                          tie_focal: bool = True) -> np.ndarray:
    """Analytic Jacobian of ``residuals`` w.r.t. the ``apply_update`` parameters at zero."""
    world, _ = _as_arrays(corr)
    q = camgeo.world_to_camera(camera, world)
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    n = len(q)
    # d(u, v)/d(q)
    duq = np.stack([camera.fx / z, np.zeros(n), -camera.fx * x / z ** 2], axis=1)
    dvq = np.stack([np.zeros(n), camera.fy / z, -camera.fy * y / z ** 2], axis=1)
    # q = exp(-[w]x) R^T (p - t) -> dq/dw = [q]x ; dq/dt = -R^T
    qx = np.zeros((n, 3, 3))
    qx[:, 0, 1], qx[:, 0, 2] = -z, y
    qx[:, 1, 0], qx[:, 1, 2] = z, -x
    qx[:, 2, 0], qx[:, 2, 1] = -y, x
    dqt = -camera.R.T
    cols = 6 + (0 if not refine_focal else (1 if tie_focal else 2))
    jac = np.zeros((2 * n, cols))
    jac[0::2, 0:3] = np.einsum("ni,nij->nj", duq, qx)
    jac[1::2, 0:3] = np.einsum("ni,nij->nj", dvq, qx)
    jac[0::2, 3:6] = duq @ dqt
    jac[1::2, 3:6] = dvq @ dqt
    if refine_focal:
        jac[0::2, 6] = camera.fx * x / z
        if tie_focal:
            jac[1::2, 6] = camera.fy * y / z
        else:
            jac[1::2, 7] = camera.fy * y / z
    return jac


@dataclass(frozen=True)
class RefineOptions:
    refine_focal: bool = False
    tie_focal: bool = True
    max_iterations: int = 100
    tolerance: float = 1e-12  # stop when the RMSE improvement (px) drops below this
    initial_lambda: float = 1e-3


@dataclass(frozen=True)
class PoseFit:
    camera: CameraModel
    rmse: float
    initial_rmse: float
    iterations: int
    converged: bool


def refine_pose(init: CameraModel, corr, options: RefineOptions | None = None) -> PoseFit:
    """Levenberg-Marquardt reprojection-error minimization.

    Never returns a camera worse than ``init``. When the iteration cap is hit
    first, the best iterate is returned with ``converged=False``.
    """
    opts = options or RefineOptions()
    world, pixel = _as_arrays(corr)
    need = 6 if opts.refine_focal else 4
    if len(world) < need:
        raise CalibrationError(f"need at least {need} correspondences, got {len(world)}")
    data = (world, pixel)
    cam = init
    r = residuals(cam, data)
    cost = float(r @ r)
    rmse0 = float(np.sqrt(cost / len(world)))
    lam = opts.initial_lambda
    converged = False
    it = 0
    while it < opts.max_iterations:
        it += 1
        jac = reprojection_jacobian(cam, data, opts.refine_focal, opts.tie_focal)
        jtj = jac.T @ jac
        g = jac.T @ r
        damp = np.diag(np.maximum(np.diag(jtj), 1e-12))
        try:
            step = -np.linalg.solve(jtj + lam * damp, g)
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        trial = apply_update(cam, step, opts.refine_focal, opts.tie_focal)
        try:
            r_new = residuals(trial, data)
            cost_new = float(r_new @ r_new)
        except (CalibrationError, DataError):
            cost_new = np.inf
        if cost_new < cost:
            old_rmse = np.sqrt(cost / len(world))
            cam, r, cost = trial, r_new, cost_new
            lam = max(lam / 10, 1e-15)
            if old_rmse - np.sqrt(cost / len(world)) < opts.tolerance:
                converged = True
                break
        else:
            lam *= 10
            if lam > 1e16:
                converged = True
                break
    if not converged:
        log.warning("pose refinement stopped at the iteration cap (%d)", opts.max_iterations)
    return PoseFit(cam, float(np.sqrt(cost / len(world))), rmse0, it, converged)
