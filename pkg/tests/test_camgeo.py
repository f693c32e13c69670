import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import camera_at, identity_camera, random_camera
from roadside3d import camgeo
from roadside3d.camgeo import Homography, PointAtInfinity
from roadside3d.model import CameraModel, DataError, PerceptionCuboid


def slab_oracle(origin, direction, lower, upper):
    """Entry/exit parameters found by intersecting the ray with all six face planes."""
    ts = []
    for k in range(3):
        if direction[k] == 0:
            continue
        for bound in (lower[k], upper[k]):
            t = (bound - origin[k]) / direction[k]
            p = origin + t * direction
            if t >= 0 and all(lower[j] - 1e-9 <= p[j] <= upper[j] + 1e-9 for j in range(3)):
                ts.append(t)
    return (min(ts), max(ts)) if ts else None


class TestProjection:
    def test_principal_axis_point(self):
        assert np.allclose(camgeo.project_world_to_image(identity_camera(), (0, 0, 5)), (512, 288))

    def test_offset_point(self):
        assert np.allclose(camgeo.project_world_to_image(identity_camera(), (1, 0, 5)), (712, 288))

    def test_behind_camera(self):
        assert camgeo.project_world_to_image(identity_camera(), (0, 0, -1)) is None

    def test_near_plane_is_behind(self):
        assert camgeo.project_world_to_image(identity_camera(), (0, 0, 1e-6)) is None

    def test_outside_image_still_returned(self):
        uv = camgeo.project_world_to_image(identity_camera(), (100, 0, 1))
        assert uv[0] > 1024

    def test_vectorized_matches_single(self):
        rng = np.random.default_rng(0)
        cam = random_camera(rng)
        pts = rng.uniform(-60, 60, (50, 3))
        uv, valid = camgeo.project_points(cam, pts)
        for p, q, ok in zip(pts, uv, valid):
            single = camgeo.project_world_to_image(cam, p)
            assert (single is None) == (not ok)
            if ok:
                assert np.array_equal(single, q)

    def test_world_camera_round_trip(self):
        rng = np.random.default_rng(1)
        cam = random_camera(rng)
        p = rng.normal(size=(10, 3)) * 20
        assert np.allclose(camgeo.camera_to_world(cam, camgeo.world_to_camera(cam, p)), p, atol=1e-12)


class TestPixelRay:
    def test_principal_point_follows_optical_axis(self):
        cam = random_camera(np.random.default_rng(2))
        ray = camgeo.pixel_ray(cam, (cam.cx, cam.cy))
        assert np.allclose(ray.direction, cam.optical_axis, atol=1e-15)
        assert ray.origin == cam.translation

    def test_identity_pose_45_degrees(self):
        cam = identity_camera()
        ray = camgeo.pixel_ray(cam, (cam.cx + cam.fx, cam.cy))
        assert np.allclose(ray.direction, np.array([1, 0, 1]) / math.sqrt(2), atol=1e-15)

    def test_direction_is_unit(self):
        ray = camgeo.Ray((0, 0, 0), (3, 4, 12))
        assert abs(np.linalg.norm(ray.direction) - 1) < 1e-12

    def test_random_point_lies_on_its_ray(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            cam = random_camera(rng)
            p = cam.t + 80 * cam.optical_axis + rng.normal(size=3) * 10
            uv = camgeo.project_world_to_image(cam, p)
            ray = camgeo.pixel_ray(cam, uv)
            d = np.asarray(ray.direction)
            t = float(np.dot(p - ray.origin, d))
            assert np.linalg.norm(ray.at(t) - p) < 1e-9

    def test_points_on_ray_reproject(self):
        rng = np.random.default_rng(4)
        cam = random_camera(rng)
        px = (700.5, 301.25)
        ray = camgeo.pixel_ray(cam, px)
        for t in (0.5, 3.0, 40.0, 900.0):
            assert np.allclose(camgeo.project_world_to_image(cam, ray.at(t)), px, atol=1e-6)


class TestHomography:
    def test_identity(self):
        assert np.array_equal(camgeo.apply_homography(np.eye(3), (3.5, -2.0)), (3.5, -2.0))

    def test_pure_scale(self):
        assert np.allclose(camgeo.apply_homography(np.diag([2.0, 2.0, 1.0]), (3, 4)), (6, 8))

    def test_generic_hand_computed(self):
        # w = 0.5*2 + 1 = 2; x = (2 + 2 + 3) / 2; y = (1 + 4) / 2
        H = [[1, 2, 3], [0, 1, 4], [0.5, 0, 1]]
        assert np.allclose(camgeo.apply_homography(H, (2, 1)), (3.5, 2.5), atol=1e-15)

    def test_point_at_infinity(self):
        with pytest.raises(PointAtInfinity):
            camgeo.apply_homography([[1, 0, 0], [0, 1, 0], [1, 0, 1]], (-1, 0))

    def test_canonical_scale(self):
        h = Homography(np.diag([4.0, 4.0, 2.0]))
        assert h.H[2, 2] == 1.0 and h.H[0, 0] == 2.0

    def test_singular_rejected(self):
        with pytest.raises(DataError):
            Homography(np.zeros((3, 3)))

    @given(st.lists(st.floats(-0.3, 0.3), min_size=8, max_size=8),
           st.tuples(st.floats(-100, 100), st.floats(-100, 100)))
    def test_inverse_round_trip(self, noise, p):
        m = np.eye(3) + np.append(noise, 0.0).reshape(3, 3) * [[1, 1, 100], [1, 1, 100], [0.001, 0.001, 0]]
        H = Homography(m)
        q = H.apply(p)
        back = H.inverse().apply(q)
        assert np.allclose(back, p, atol=1e-9)


class TestLiftWithDepth:
    def test_principal_point(self):
        assert np.allclose(camgeo.lift_pixel_with_depth(identity_camera(), (512, 288), 5.0), (0, 0, 5))

    def test_rotated_camera_hand_computed(self):
        # camera-to-world is a quarter turn about z; pixel (cx + fx, cy) at depth 2
        # is (2, 0, 2) in the camera frame, which rotates to (0, 2, 2)
        rot = [[0, -1, 0], [1, 0, 0], [0, 0, 1]]
        cam = CameraModel("r", 1024, 576, 1000, 1000, 512, 288, np.ravel(rot), (1, 2, 3))
        assert np.allclose(camgeo.lift_pixel_with_depth(cam, (1512, 288), 2.0), (1, 4, 5), atol=1e-12)

    def test_depth_must_be_positive(self):
        with pytest.raises(ValueError):
            camgeo.lift_pixel_with_depth(identity_camera(), (0, 0), 0.0)

    @settings(max_examples=200)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 500))
    def test_round_trip_property(self, seed, depth):
        rng = np.random.default_rng(seed)
        cam = random_camera(rng)
        px = rng.uniform(0, [cam.width, cam.height])
        p = camgeo.lift_pixel_with_depth(cam, px, depth)
        assert np.allclose(camgeo.project_world_to_image(cam, p), px, atol=1e-6)
        assert camgeo.world_to_camera(cam, p)[2] == pytest.approx(depth, rel=1e-12)


class TestSampleRayPoints:
    def camera_outside(self):
        return camera_at((-450.0, 0.0, 3.0), (0.0, 0.0, 3.0), fx=1000)

    def test_two_points_are_entry_and_exit(self):
        cam = self.camera_outside()
        pts = camgeo.sample_ray_points(cam, (cam.cx, cam.cy), 2)
        assert np.allclose(pts, [(-400, 0, 3), (400, 0, 3)], atol=1e-9)

    def test_entry_exit_match_slab_oracle(self):
        rng = np.random.default_rng(5)
        cub = PerceptionCuboid()
        hits = 0
        for _ in range(300):
            cam = random_camera(rng)
            px = rng.uniform(0, [cam.width, cam.height])
            pts = camgeo.sample_ray_points(cam, px, 2, cub)
            ray = camgeo.pixel_ray(cam, px)
            ref = slab_oracle(np.array(ray.origin), np.array(ray.direction), cub.lower, cub.upper)
            if ref is None:
                assert len(pts) == 0
                continue
            hits += 1
            want = ray.at(np.array([max(ref[0], 0.0), ref[1]]))
            assert np.allclose(pts, want, atol=1e-4)
        assert hits > 50

    def test_uniform_spacing_and_reprojection(self):
        rng = np.random.default_rng(6)
        cam = self.camera_outside()
        for _ in range(50):
            px = (cam.cx + rng.uniform(-200, 200), cam.cy + rng.uniform(-10, 10))
            pts = camgeo.sample_ray_points(cam, px, 16)
            if not len(pts):
                continue
            gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            assert np.allclose(gaps, gaps[0], rtol=1e-9)
            uv, ok = camgeo.project_points(cam, pts)
            assert ok.all() and np.allclose(uv, px, atol=1e-6)

    def test_ray_above_cuboid_misses(self):
        cam = camera_at((0.0, 0.0, 10.0), (100.0, 0.0, 10.0), fx=1000)
        assert camgeo.sample_ray_points(cam, (cam.cx, cam.cy), 8).shape == (0, 3)

    def test_single_point_is_interval_midpoint(self):
        cam = self.camera_outside()
        (p,) = camgeo.sample_ray_points(cam, (cam.cx, cam.cy), 1)
        assert np.allclose(p, (0, 0, 3), atol=1e-9)

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            camgeo.sample_ray_points(self.camera_outside(), (0, 0), 0)

    def test_grazing_contact_counts(self):
        ray = camgeo.Ray((0.0, -50.0, 6.0), (0.0, 1.0, 0.0))
        assert camgeo.ray_box_interval(ray, (-1, -40, 0), (1, 40, 6)) == (10.0, 90.0)
        corner = camgeo.Ray((-2.0, -40.0, 0.0), (1.0, 0.0, 0.0))
        assert camgeo.ray_box_interval(corner, (0, -40, 0), (0, 40, 6)) == (2.0, 2.0)


class TestRotations:
    def test_rodrigues_quarter_turn(self):
        r = camgeo.rotation_from_axis_angle([0, 0, math.pi / 2])
        assert np.allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_look_at_axes(self):
        r = camgeo.look_at((0, 0, 10), (10, 0, 10))
        assert np.allclose(r[:, 2], [1, 0, 0])  # forward
        assert np.allclose(r[:, 1], [0, 0, -1])  # image down is world down
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_orthonormalize(self):
        rng = np.random.default_rng(7)
        m = camgeo.rotation_from_axis_angle(rng.normal(size=3)) + rng.normal(size=(3, 3)) * 1e-3
        r = camgeo.orthonormalize(m)
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12) and np.linalg.det(r) > 0
