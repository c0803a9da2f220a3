import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from nocspose.errors import NonPositiveDepth
from nocspose.geometry import (
    CameraIntrinsics, PoseSE3, SphericalPose, compose, look_at, project, relative_pose,
    rotation_error_deg, se3_local_delta, se3_local_step, so3_exp, target_camera_ring, unproject,
)

from conftest import random_rotation, rot_y, rot_z

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def random_pose(seed) -> PoseSE3:
    rng = np.random.default_rng(seed)
    return PoseSE3(random_rotation(rng), rng.normal(size=3))


def geodesic_oracle(ra, rb) -> float:
    """Independent angle: the norm of the relative rotation vector."""
    return float(np.degrees(np.linalg.norm(Rotation.from_matrix(ra @ rb.T).as_rotvec())))


class TestPoseSE3:
    def test_rotation_stays_orthonormal(self, rng):
        p = PoseSE3(random_rotation(rng), rng.normal(size=3))
        assert np.abs(p.rotation.T @ p.rotation - np.eye(3)).max() < 1e-9
        assert np.linalg.det(p.rotation) == pytest.approx(1.0)

    def test_arrays_are_read_only(self):
        p = PoseSE3.identity()
        with pytest.raises(ValueError):
            p.translation[0] = 1.0

    def test_json_round_trip(self, rng):
        p = PoseSE3(random_rotation(rng), rng.normal(size=3))
        d = json.loads(json.dumps(p.to_json()))
        assert d["convention"] == "opencv"
        q = PoseSE3.from_json(d)
        assert np.array_equal(q.rotation, p.rotation)
        assert np.array_equal(q.translation, p.translation)

    def test_json_requires_convention(self):
        d = PoseSE3.identity().to_json()
        del d["convention"]
        with pytest.raises(ValueError):
            PoseSE3.from_json(d)


class TestCompose:
    def test_identity(self):
        c = compose(PoseSE3.identity(), PoseSE3.identity())
        assert np.array_equal(c.matrix(), np.eye(4))

    def test_inverse_gives_identity(self, rng):
        p = PoseSE3(random_rotation(rng), rng.normal(size=3))
        assert np.abs(compose(p, p.inverse()).matrix() - np.eye(4)).max() < 1e-9

    def test_two_quarter_turns_make_half_turn(self):
        q = PoseSE3(rot_z(90.0), np.zeros(3))
        c = compose(q, q)
        basis = np.eye(3)
        # apply both transforms one after the other to the basis points
        expected = q.apply(q.apply(basis))
        assert np.allclose(c.apply(basis), expected, atol=1e-12)
        assert np.allclose(c.apply(basis), [[-1, 0, 0], [0, -1, 0], [0, 0, 1]], atol=1e-12)
        assert rotation_error_deg(c.rotation, np.eye(3)) == pytest.approx(180.0)

    def test_maps_a_of_b(self, rng):
        a = PoseSE3(random_rotation(rng), rng.normal(size=3))
        b = PoseSE3(random_rotation(rng), rng.normal(size=3))
        x = rng.normal(size=(5, 3))
        assert np.allclose(compose(a, b).apply(x), a.apply(b.apply(x)), atol=1e-12)

    @given(seeds, seeds, seeds)
    def test_associative(self, s1, s2, s3):
        a, b, c = random_pose(s1), random_pose(s2), random_pose(s3)
        lhs = compose(compose(a, b), c).matrix()
        rhs = compose(a, compose(b, c)).matrix()
        assert np.abs(lhs - rhs).max() < 1e-9

    @given(seeds)
    def test_double_inverse(self, s):
        p = random_pose(s)
        assert np.abs(p.inverse().inverse().matrix() - p.matrix()).max() < 1e-12


class TestRelativePose:
    def test_same_view_is_identity(self, rng):
        p = PoseSE3(random_rotation(rng), rng.normal(size=3))
        assert np.abs(relative_pose(p, p).matrix() - np.eye(4)).max() < 1e-12

    def test_reference_at_origin(self, rng):
        # with the identity as view i the relative pose is the map camera_j -> camera_i = q^-1
        q = PoseSE3(random_rotation(rng), rng.normal(size=3))
        r = relative_pose(PoseSE3.identity(), q)
        assert np.abs(r.matrix() - np.linalg.inv(q.matrix())).max() < 1e-12

    def test_maps_camera_j_into_camera_i(self, rng):
        pi = PoseSE3(random_rotation(rng), rng.normal(size=3))
        pj = PoseSE3(random_rotation(rng), rng.normal(size=3))
        x = rng.normal(size=(4, 3))
        assert np.allclose(relative_pose(pi, pj).apply(pj.apply(x)), pi.apply(x), atol=1e-12)

    def test_sixty_degrees_apart_in_azimuth(self):
        a = SphericalPose(20.0, 10.0, 2.5).to_pose()
        b = SphericalPose(20.0, 70.0, 2.5).to_pose()
        r = relative_pose(a, b)
        expected = geodesic_oracle(a.rotation, b.rotation)
        assert rotation_error_deg(r.rotation, np.eye(3)) == pytest.approx(expected, abs=1e-9)
        # at zero elevation the cameras differ by a pure 60 degree turn
        a0 = SphericalPose(0.0, 10.0, 2.5).to_pose()
        b0 = SphericalPose(0.0, 70.0, 2.5).to_pose()
        assert rotation_error_deg(relative_pose(a0, b0).rotation, np.eye(3)) == pytest.approx(60.0, abs=1e-9)

    @given(seeds, seeds, seeds)
    def test_invariant_to_common_frame_change(self, s1, s2, s3):
        a, b, g = random_pose(s1), random_pose(s2), random_pose(s3)
        r0 = relative_pose(a, b).matrix()
        r1 = relative_pose(compose(a, g), compose(b, g)).matrix()
        assert np.abs(r0 - r1).max() < 1e-9


class TestRotationError:
    def test_identity(self):
        assert rotation_error_deg(np.eye(3), np.eye(3)) == 0.0

    def test_antipodal(self):
        assert rotation_error_deg(rot_z(180.0), np.eye(3)) == pytest.approx(180.0)

    def test_shared_axis_difference(self):
        assert rotation_error_deg(rot_z(37.0), rot_z(12.0)) == pytest.approx(25.0, abs=1e-9)

    @given(seeds, seeds)
    def test_symmetric_and_bounded(self, s1, s2):
        a = random_rotation(np.random.default_rng(s1))
        b = random_rotation(np.random.default_rng(s2))
        e = rotation_error_deg(a, b)
        assert 0.0 <= e <= 180.0
        assert e == pytest.approx(rotation_error_deg(b, a), abs=1e-9)
        assert e == pytest.approx(geodesic_oracle(a, b), abs=1e-6)

    @given(seeds)
    def test_zero_only_for_equal(self, s):
        a = random_rotation(np.random.default_rng(s))
        assert rotation_error_deg(a, a) < 1e-5
        assert rotation_error_deg(a, a @ rot_y(0.5)) > 0.4


class TestLocalStep:
    def test_zero_delta_returns_base(self, rng):
        p = PoseSE3(random_rotation(rng), rng.normal(size=3))
        assert se3_local_step(p, np.zeros(6)) is p

    def test_quarter_turn_about_z(self):
        p = se3_local_step(PoseSE3.identity(), [0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0])
        assert np.allclose(p.rotation, rot_z(90.0), atol=1e-12)
        assert np.allclose(p.translation, 0.0)

    def test_matrix_log_round_trip(self, rng):
        for _ in range(20):
            base = PoseSE3(random_rotation(rng), rng.normal(size=3))
            w = rng.normal(size=3)
            w *= rng.uniform(0.0, 0.99) / np.linalg.norm(w)
            delta = np.concatenate([w, rng.normal(size=3)])
            back = se3_local_delta(base, se3_local_step(base, delta))
            assert np.abs(back - delta).max() < 1e-8

    def test_pivot_keeps_pivot_fixed(self, rng):
        base = PoseSE3(random_rotation(rng), rng.normal(size=3))
        c = rng.normal(size=3)
        x = base.inverse().apply(c)  # the point that lands on the pivot
        stepped = se3_local_step(base, np.r_[rng.normal(size=3) * 0.3, 0.0, 0.0, 0.0], pivot=c)
        assert np.allclose(stepped.apply(x), c, atol=1e-12)


class TestProjection:
    def test_optical_axis(self):
        k = CameraIntrinsics(500.0, 500.0, 256.0, 256.0, 512, 512)
        assert np.allclose(project([0.0, 0.0, 1.0], k), [256.0, 256.0])

    def test_closed_form(self):
        k = CameraIntrinsics(512.0, 512.0, 256.0, 256.0, 512, 512)
        assert np.allclose(project([1.0, 0.0, 2.0], k), [512.0, 256.0])

    def test_matches_scalar_pinhole(self, rng):
        for _ in range(10):
            k = CameraIntrinsics(rng.uniform(100, 900), rng.uniform(100, 900), rng.uniform(0, 300),
                                 rng.uniform(0, 200), 320, 240)
            x, y, z = rng.normal(), rng.normal(), rng.uniform(0.1, 5.0)
            u, v = project([x, y, z], k)
            assert u == pytest.approx(k.fx * x / z + k.cx, rel=1e-12)
            assert v == pytest.approx(k.fy * y / z + k.cy, rel=1e-12)

    @pytest.mark.parametrize("z", [0.0, -1.0])
    def test_behind_camera_raises(self, z):
        with pytest.raises(NonPositiveDepth):
            project([0.1, 0.2, z], CameraIntrinsics.from_fov(40.0, 64, 64))

    @given(st.floats(0.0, 319.99), st.floats(0.0, 239.99), st.floats(0.01, 100.0))
    def test_unproject_round_trip(self, u, v, d):
        k = CameraIntrinsics(400.0, 410.0, 160.0, 120.0, 320, 240)
        back = project(unproject([u, v], d, k), k)
        assert np.abs(back - [u, v]).max() < 1e-6

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(-1.0, 1.0, 10.0, 10.0, 20, 20)
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, 1.0, 20.0, 10.0, 20, 20)


class TestSphericalPoses:
    def test_look_at_points_forward_axis_at_target(self):
        p = look_at([2.0, 1.0, 3.0], [0.5, 0.5, 0.5])
        cam = p.apply([0.5, 0.5, 0.5])
        assert abs(cam[0]) < 1e-12 and abs(cam[1]) < 1e-12 and cam[2] > 0

    def test_image_up_is_world_up(self):
        p = SphericalPose(0.0, 30.0, 2.0).to_pose()
        # OpenCV y points down, so world +y must map to a negative camera y direction
        assert (p.rotation @ np.array([0.0, 1.0, 0.0]))[1] < -0.99

    def test_azimuth_wraps(self):
        assert SphericalPose(10.0, -30.0, 2.0).azimuth == pytest.approx(330.0)
        assert SphericalPose(10.0, 720.0, 2.0).azimuth == pytest.approx(0.0)

    def test_elevation_bounds(self):
        with pytest.raises(ValueError):
            SphericalPose(91.0, 0.0, 2.0)

    @given(st.floats(-80.0, 80.0), st.floats(0.0, 359.0), st.floats(0.5, 5.0))
    def test_from_pose_round_trip(self, el, az, r):
        s = SphericalPose.from_pose(SphericalPose(el, az, r).to_pose())
        assert s.elevation == pytest.approx(el, abs=1e-7)
        assert s.radius == pytest.approx(r, rel=1e-9)
        assert min(abs(s.azimuth - az), 360.0 - abs(s.azimuth - az)) < 1e-6


class TestTargetRing:
    def test_sixty_degree_spacing(self):
        ring = target_camera_ring(17.0, 2.2)
        az = [SphericalPose.from_pose(p).azimuth for p in ring]
        steps = np.diff(np.unwrap(np.radians(az)))
        assert np.allclose(np.degrees(steps), 60.0, atol=1e-9)

    def test_first_view_elevation_and_azimuth(self):
        s = SphericalPose.from_pose(target_camera_ring(0.0, 2.0)[0])
        assert s.elevation == pytest.approx(20.0, abs=1e-9)
        assert min(s.azimuth, 360.0 - s.azimuth) < 1e-9

    def test_alternating_elevations(self):
        els = [SphericalPose.from_pose(p).elevation for p in target_camera_ring(5.0, 2.0)]
        assert np.allclose(els, [20, -10, 20, -10, 20, -10], atol=1e-9)

    def test_forward_axes_pass_through_cube_centre(self):
        c = np.array([0.5, 0.5, 0.5])
        for p in target_camera_ring(33.0, 1.7):
            o, f = p.camera_center(), p.forward_axis()
            d = c - o
            dist = np.linalg.norm(d - (d @ f) * f)
            assert dist < 1e-9

    def test_offset_is_configurable(self):
        a = SphericalPose.from_pose(target_camera_ring(0.0, 2.0, azimuth_offset=30.0)[0])
        assert a.azimuth == pytest.approx(30.0, abs=1e-9)

    def test_rejects_nonpositive_radius(self):
        with pytest.raises(ValueError):
            target_camera_ring(0.0, 0.0)


def test_so3_exp_matches_rot_z():
    assert np.allclose(so3_exp([0.0, 0.0, np.radians(33.0)]), rot_z(33.0), atol=1e-12)
