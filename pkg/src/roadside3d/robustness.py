"""Robustness variants of a scene: offline cameras and shaken cameras.

Both take an explicit seed or ``numpy.random.Generator``; there is no global
RNG state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .model import CameraModel, InvariantError, SceneConfig

log = logging.getLogger(__name__)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def drop_cameras(views, k: int, seed=None):
    """Remove exactly ``k`` distinct cameras chosen uniformly at random.

    ``views`` is a SceneConfig or a sequence of cameras / camera ids; the
    same kind is returned, with the original order kept.
    """
    items = list(views.cameras) if isinstance(views, SceneConfig) else list(views)
    if not 0 <= k < len(items):
        raise ValueError(f"k must satisfy 0 <= k < {len(items)}, got {k}")
    drop = set(_rng(seed).choice(len(items), size=k, replace=False).tolist()) if k else set()
    kept = [v for i, v in enumerate(items) if i not in drop]
    if isinstance(views, SceneConfig):
        return replace(views, cameras=tuple(kept))
    return kept


@dataclass(frozen=True)
class PerturbParams:
    """Gaussian camera shake: pan/tilt in degrees, zoom as a focal-length ratio."""

    pan_sigma: float = 3.33
    tilt_sigma: float = 1.67
    zoom_mean: float = 1.0
    zoom_sigma: float = 0.03
    seed: int | None = None

    def __post_init__(self):
        for name in ("pan_sigma", "tilt_sigma", "zoom_sigma"):
            if getattr(self, name) < 0:
                raise InvariantError(name, "must be non-negative")


@dataclass(frozen=True)
class Shake:
    pan: float  # degrees, positive turns the optical axis toward camera +x (right)
    tilt: float  # degrees, positive turns the optical axis toward camera -y (up)
    zoom: float


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def draw_shakes(params: PerturbParams, n: int, rng=None) -> list[Shake]:
    rng = _rng(params.seed if rng is None else rng)
    out = []
    for _ in range(n):
        pan = rng.normal(0.0, params.pan_sigma)
        tilt = rng.normal(0.0, params.tilt_sigma)
        zoom = rng.normal(params.zoom_mean, params.zoom_sigma)
        while zoom <= 0:
            log.info("non-positive zoom draw %.4f resampled", zoom)
            zoom = rng.normal(params.zoom_mean, params.zoom_sigma)
        out.append(Shake(float(pan), float(tilt), float(zoom)))
    return out


def shake_camera(camera: CameraModel, shake: Shake) -> CameraModel:
    """Pan about the camera's vertical axis, then tilt about its horizontal axis."""
    local = _rot_y(math.radians(shake.pan)) @ _rot_x(math.radians(shake.tilt))
    rot = camera.R @ local
    return replace(camera, rotation=rot.ravel(), fx=camera.fx * shake.zoom, fy=camera.fy * shake.zoom)


def perturb_cameras(cameras: Sequence[CameraModel] | SceneConfig, params: PerturbParams | None = None,
                    rng=None):
    """Independently shake every camera. Deterministic for a given seed."""
    params = params or PerturbParams()
    cams = list(cameras.cameras) if isinstance(cameras, SceneConfig) else list(cameras)
    shakes = draw_shakes(params, len(cams), rng)
    out = [shake_camera(c, s) for c, s in zip(cams, shakes)]
    if isinstance(cameras, SceneConfig):
        return replace(cameras, cameras=tuple(out))
    return out
