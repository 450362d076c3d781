import math

import numpy as np
import pytest

from vloc.errors import InvalidDepth, NearSingularRotation
from vloc.geometry import (
    CameraIntrinsics,
    Pose,
    project,
    project_array,
    rotation_angle,
    rotvec_to_quat,
    se3_exp,
    se3_log,
    unproject,
)
from conftest import random_pose

K64 = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)


def tz(d):
    return Pose(np.array([0.0, 0.0, d]), np.array([1.0, 0.0, 0.0, 0.0]))


class TestCompose:
    def test_identity_neutral(self, rng):
        p = random_pose(rng)
        assert Pose.identity().compose(p).almost_equal(p, 1e-15)
        assert p.compose(Pose.identity()).almost_equal(p, 1e-15)

    def test_inverse_cancels(self, rng):
        for _ in range(20):
            p = random_pose(rng)
            assert p.compose(p.inverse()).almost_equal(Pose.identity(), 1e-12)

    def test_commuting_translations(self):
        assert tz(1.0).compose(tz(2.0)).almost_equal(tz(3.0), 1e-15)

    def test_associative(self, rng):
        a, b, c = (random_pose(rng) for _ in range(3))
        assert a.compose(b).compose(c).almost_equal(a.compose(b.compose(c)), 1e-12)


class TestBetween:
    def test_self_is_identity(self, rng):
        p = random_pose(rng)
        assert p.between(p).almost_equal(Pose.identity(), 1e-12)

    def test_from_identity(self, rng):
        p = random_pose(rng)
        assert Pose.identity().between(p).almost_equal(p, 1e-15)

    def test_compose_between_roundtrip(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            p, q = random_pose(rng), random_pose(rng)
            assert p.compose(p.between(q)).almost_equal(q, 1e-12)


class TestQuaternionInvariants:
    def test_canonical_sign(self, rng):
        for _ in range(200):
            p = random_pose(rng)
            assert p.q[0] >= 0.0

    def test_norm_stays_unit_over_chained_composition(self):
        # 1e6 chained compositions keep |q| within 1e-9 of unit
        rng = np.random.default_rng(3)
        step = random_pose(rng)
        acc = Pose.identity()
        worst = 0.0
        for _ in range(1_000_000):
            acc = acc.compose(step)
            worst = max(worst, abs(float(np.dot(acc.q, acc.q)) - 1.0))
        assert worst < 1e-9


class TestProjection:
    def test_principal_axis(self):
        uv = project(K64, [0.0, 0.0, 2.0])
        assert np.allclose(uv, [64.0, 64.0])

    def test_offset_point(self):
        uv = project(K64, [1.0, 0.0, 2.0])
        assert np.allclose(uv, [114.0, 64.0])

    def test_behind_camera(self):
        assert project(K64, [0.0, 0.0, -1.0]) is None

    def test_outside_image(self):
        assert project(K64, [10.0, 0.0, 2.0]) is None

    def test_array_matches_scalar(self, rng):
        pts = rng.normal(0.0, 2.0, (500, 3))
        uv, ok = project_array(K64, pts)
        for i in range(len(pts)):
            single = project(K64, pts[i])
            if single is None:
                assert not ok[i]
            else:
                assert ok[i] and np.allclose(uv[i], single)


class TestUnprojection:
    def test_inverse_of_projection_example(self):
        assert np.allclose(unproject(K64, [64.0, 64.0], 2.0), [0.0, 0.0, 2.0])
        assert np.allclose(unproject(K64, [114.0, 64.0], 2.0), [1.0, 0.0, 2.0])

    def test_zero_depth_is_sensor_hole(self):
        with pytest.raises(InvalidDepth):
            unproject(K64, [64.0, 64.0], 0.0)

    def test_out_of_range_depth(self):
        with pytest.raises(InvalidDepth):
            unproject(K64, [64.0, 64.0], 25.0)

    def test_project_unproject_identity_exhaustive(self):
        # 16x16 pixel grid x 3 depths
        for u in np.linspace(4.0, 124.0, 16):
            for v in np.linspace(4.0, 124.0, 16):
                for d in (0.3, 2.0, 11.0):
                    uv = project(K64, unproject(K64, [u, v], d))
                    assert uv is not None
                    assert np.max(np.abs(uv - [u, v])) < 1e-9


class TestExpLog:
    def test_exp_zero_is_identity(self):
        assert se3_exp(np.zeros(6)).almost_equal(Pose.identity(), 1e-15)

    def test_log_identity_is_zero(self):
        assert np.allclose(se3_log(Pose.identity()), np.zeros(6))

    def test_roundtrip_seeded(self):
        rng = np.random.default_rng(11)
        count = 0
        while count < 1000:
            xi = rng.normal(0.0, 1.2, 6)
            if np.linalg.norm(xi[3:]) >= 3.0:
                continue
            count += 1
            assert np.max(np.abs(se3_log(se3_exp(xi)) - xi)) < 1e-9

    def test_exp_log_pose_roundtrip(self, rng):
        for _ in range(200):
            p = random_pose(rng)
            try:
                xi = se3_log(p)
            except NearSingularRotation:
                continue
            assert se3_exp(xi).almost_equal(p, 1e-9)

    def test_near_pi_rejected(self):
        q = rotvec_to_quat([math.pi - 1e-9, 0.0, 0.0])
        with pytest.raises(NearSingularRotation):
            se3_log(Pose(np.zeros(3), q))


class TestRotationAngle:
    def test_zero_iff_equal_up_to_sign(self, rng):
        p = random_pose(rng)
        assert rotation_angle(p.q, p.q) == 0.0
        assert rotation_angle(p.q, -p.q) < 1e-12

    def test_symmetric(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        assert rotation_angle(a.q, b.q) == pytest.approx(rotation_angle(b.q, a.q), abs=1e-15)

    def test_known_angle(self):
        q = rotvec_to_quat([0.0, 0.3, 0.0])
        assert rotation_angle([1, 0, 0, 0], q) == pytest.approx(0.3, abs=1e-12)


class TestSerialization:
    def test_roundtrip_exact(self, rng):
        for _ in range(50):
            p = random_pose(rng)
            q = Pose.from_line(p.to_line())
            assert np.array_equal(p.t, q.t) and np.array_equal(p.q, q.q)

    def test_line_has_seven_fields(self, rng):
        assert len(random_pose(rng).to_line().split()) == 7


class TestCameraIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=100.0, fy=100.0, cx=200.0, cy=64.0, width=128, height=128)

    def test_line_roundtrip(self):
        k = CameraIntrinsics.from_line(K64.to_line())
        assert k == K64
