"""Shared builders for test scenes."""

from __future__ import annotations

import math

import numpy as np

from roadside3d import camgeo
from roadside3d.calib import Correspondence2D3D
from roadside3d.model import Box3D, CameraModel, ClassHeightTable, SceneConfig, Terrain

HEIGHTS = ClassHeightTable.from_mapping({"car": 1.5, "van": 2.1, "bus": 3.3, "truck": 3.6})


def identity_camera(fx=1000.0, fy=1000.0, cx=512.0, cy=288.0, width=1024, height=576, cid="c0"):
    return CameraModel(cid, width, height, fx, fy, cx, cy, np.eye(3).ravel(), (0.0, 0.0, 0.0))


def camera_at(position, target, fx=1200.0, width=1920, height=1080, cid="c0", fy=None):
    rot = camgeo.look_at(position, target)
    return CameraModel(cid, width, height, fx, fy or fx, width / 2, height / 2, rot.ravel(), position)


def random_camera(rng, cid="c0"):
    pos = np.array([rng.uniform(-50, 50), rng.uniform(-30, 30), rng.uniform(8, 20)])
    target = np.array([rng.uniform(-50, 50), rng.uniform(-20, 20), 0.0])
    while np.linalg.norm(target[:2] - pos[:2]) < 10:
        target[:2] += 15
    fx = rng.uniform(600, 2500)
    w, h = 1920, 1080
    rot = camgeo.look_at(pos, target)
    return CameraModel(cid, w, h, fx, fx * rng.uniform(0.95, 1.05), w / 2 + rng.uniform(-20, 20),
                       h / 2 + rng.uniform(-20, 20), rot.ravel(), pos)


def flat_scene(cameras, sid="s"):
    return SceneConfig(sid, cameras, Terrain.flat((-410, 410), (-50, 50)), HEIGHTS)


def car(x, y, yaw=0.0, z=0.75, size=(4.5, 1.8, 1.5), track=None, cls="car"):
    return Box3D((x, y, z), size, yaw, cls, track)


def perturbed_pose(camera, rng, max_deg=5.0, max_m=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = camera.R @ camgeo.rotation_from_axis_angle(axis * math.radians(rng.uniform(0, max_deg)))
    shift = rng.normal(size=3)
    shift *= rng.uniform(0, max_m) / np.linalg.norm(shift)
    return camera.with_pose(rot, camera.t + shift)


def correspondences(camera, rng, n=20):
    pix = np.column_stack([rng.uniform(0, camera.width, n), rng.uniform(0, camera.height, n)])
    depth = rng.uniform(10, 80, n)
    world = np.array([camgeo.lift_pixel_with_depth(camera, p, d) for p, d in zip(pix, depth)])
    return [Correspondence2D3D(w, p) for w, p in zip(world, pix)]
