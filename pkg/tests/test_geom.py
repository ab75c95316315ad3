import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cloud, random_rotation
from rpmalign.geom import (
    GeomError,
    PointCloud,
    RigidTransform,
    anisotropic_errors,
    apply_transform,
    compose,
    estimate_normals,
    euler_zyx_deg,
    invert,
    isotropic_errors,
    modified_chamfer,
    rot_axis_angle,
    rot_euler_zyx,
    rot_z,
    rotation_angle_deg,
)


def brute_chamfer(xp, y, xc, yc):
    """O(N^2) double-loop oracle for the modified Chamfer distance."""
    fwd = 0.0
    for p in xp:
        fwd += min(((p - q) ** 2).sum() for q in yc)
    bwd = 0.0
    for q in y:
        bwd += min(((q - p) ** 2).sum() for p in xc)
    return fwd / len(xp) + bwd / len(y)


def transform_of(rng):
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


class TestTypes:
    def test_pointcloud_validates_normals(self):
        with pytest.raises(GeomError):
            PointCloud(np.zeros((2, 3)), np.ones((2, 3)))

    def test_pointcloud_rejects_nonfinite(self):
        pts = np.zeros((2, 3))
        pts[0, 0] = np.nan
        nrm = np.tile([0.0, 0.0, 1.0], (2, 1))
        with pytest.raises(GeomError):
            PointCloud(pts, nrm)

    def test_pointcloud_length_mismatch(self):
        with pytest.raises(GeomError):
            PointCloud(np.zeros((2, 3)), np.tile([0.0, 0.0, 1.0], (3, 1)))

    def test_transform_rejects_reflection(self):
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(GeomError):
            RigidTransform(refl, np.zeros(3))

    def test_transform_rejects_nonorthogonal(self):
        with pytest.raises(GeomError):
            RigidTransform(np.eye(3) + 1e-3, np.zeros(3))


class TestApplyTransform:
    def test_identity(self, rng):
        cloud = random_cloud(rng, 10)
        out = apply_transform(cloud, RigidTransform.identity())
        np.testing.assert_array_equal(out.points, cloud.points)
        np.testing.assert_array_equal(out.normals, cloud.normals)

    def test_axis_rotation(self):
        cloud = PointCloud([[1.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
        out = apply_transform(cloud, RigidTransform(rot_z(90.0), np.zeros(3)))
        np.testing.assert_allclose(out.points[0], [0.0, 1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(out.normals[0], [0.0, 0.0, 1.0], atol=1e-15)

    def test_round_trip(self, rng):
        cloud = random_cloud(rng, 5)
        t = transform_of(rng)
        back = apply_transform(apply_transform(cloud, t), invert(t))
        np.testing.assert_allclose(back.points, cloud.points, atol=1e-12)
        np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-12)

    def test_rigidity(self, rng):
        cloud = random_cloud(rng, 20)
        t = transform_of(rng)
        out = apply_transform(cloud, t)
        d_in = np.linalg.norm(cloud.points[:, None] - cloud.points[None], axis=2)
        d_out = np.linalg.norm(out.points[:, None] - out.points[None], axis=2)
        assert np.abs(d_in - d_out).max() <= 1e-9


class TestCompose:
    def test_identity(self, rng):
        t = transform_of(rng)
        out = compose(t, RigidTransform.identity())
        np.testing.assert_array_equal(out.rotation, t.rotation)
        np.testing.assert_array_equal(out.translation, t.translation)

    def test_inverse(self, rng):
        t = transform_of(rng)
        out = compose(invert(t), t)
        np.testing.assert_allclose(out.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(out.translation, np.zeros(3), atol=1e-12)

    def test_pointwise_oracle(self, rng):
        t1, t2 = transform_of(rng), transform_of(rng)
        cloud = random_cloud(rng, 10)
        via_compose = apply_transform(cloud, compose(t1, t2))
        sequential = apply_transform(apply_transform(cloud, t2), t1)
        np.testing.assert_allclose(via_compose.points, sequential.points,
                                   atol=1e-12)


class TestInvert:
    def test_identity(self):
        out = invert(RigidTransform.identity())
        np.testing.assert_array_equal(out.rotation, np.eye(3))

    def test_pure_translation(self):
        t = RigidTransform(np.eye(3), [0.1, -0.2, 0.3])
        out = invert(t)
        np.testing.assert_allclose(out.translation, [-0.1, 0.2, -0.3])

    def test_involution(self, rng):
        t = transform_of(rng)
        out = invert(invert(t))
        np.testing.assert_allclose(out.rotation, t.rotation, atol=1e-12)
        np.testing.assert_allclose(out.translation, t.translation, atol=1e-12)


class TestRotationAngle:
    def test_identity(self):
        assert rotation_angle_deg(np.eye(3)) == 0.0

    def test_quarter_turn(self):
        assert rotation_angle_deg(rot_z(90.0)) == pytest.approx(90.0, abs=1e-12)

    def test_axis_angle_construction(self, rng):
        axis = rng.normal(size=3)
        assert rotation_angle_deg(rot_axis_angle(axis, 17.0)) == pytest.approx(
            17.0, abs=1e-9)

    def test_transpose_symmetric(self, rng):
        r = random_rotation(rng)
        assert rotation_angle_deg(r.T) == pytest.approx(rotation_angle_deg(r),
                                                        abs=1e-12)


class TestIsotropicErrors:
    def test_equal(self, rng):
        t = transform_of(rng)
        assert isotropic_errors(t, t) == (0.0, 0.0)

    def test_three_four_five(self, rng):
        t = transform_of(rng)
        t2 = RigidTransform(t.rotation, t.translation + [0.3, 0.0, 0.4])
        _, trans = isotropic_errors(t, t2)
        assert trans == pytest.approx(0.5, abs=1e-12)

    def test_right_composed_rotation(self, rng):
        t = transform_of(rng)
        t2 = RigidTransform(t.rotation @ rot_z(10.0), t.translation)
        rot, _ = isotropic_errors(t, t2)
        assert rot == pytest.approx(10.0, abs=1e-9)

    def test_left_bi_invariance(self, rng):
        t1, t2, g = transform_of(rng), transform_of(rng), transform_of(rng)
        base, _ = isotropic_errors(t1, t2)
        moved, _ = isotropic_errors(compose(g, t1), compose(g, t2))
        assert moved == pytest.approx(base, abs=1e-9)


class TestAnisotropicErrors:
    def test_equal(self, rng):
        t = transform_of(rng)
        rot, trans, _ = anisotropic_errors(t, t)
        assert rot == 0.0 and trans == 0.0

    def test_translation_mean(self, rng):
        t = transform_of(rng)
        t2 = RigidTransform(t.rotation, t.translation + [0.3, 0.0, 0.0])
        _, trans, _ = anisotropic_errors(t, t2)
        assert trans == pytest.approx(0.1, abs=1e-12)

    def test_yaw_only_difference(self):
        t1 = RigidTransform(rot_euler_zyx(20.0, 10.0, 5.0), np.zeros(3))
        t2 = RigidTransform(rot_euler_zyx(32.0, 10.0, 5.0), np.zeros(3))
        rot, _, locked = anisotropic_errors(t1, t2)
        assert not locked
        assert rot == pytest.approx(4.0, abs=1e-9)

    def test_gimbal_lock_flagged(self):
        t1 = RigidTransform(rot_euler_zyx(0.0, 90.0, 0.0), np.zeros(3))
        rot, trans, locked = anisotropic_errors(t1, t1)
        assert locked
        assert np.isfinite(rot) and np.isfinite(trans)

    def test_euler_round_trip(self, rng):
        angles = rng.uniform(-80.0, 80.0, size=3)
        r = rot_euler_zyx(*angles)
        out, locked = euler_zyx_deg(r)
        assert not locked
        np.testing.assert_allclose(out, angles, atol=1e-9)


class TestModifiedChamfer:
    def test_identity(self, rng):
        cloud = random_cloud(rng, 16)
        assert modified_chamfer(cloud, cloud, cloud, cloud) == 0.0

    def test_two_point_hand_case(self):
        a = PointCloud([[0.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
        b = PointCloud([[1.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
        assert modified_chamfer(a, b, a, b) == pytest.approx(2.0, abs=1e-15)

    def test_brute_force_oracle(self, rng):
        xp, y = random_cloud(rng, 64), random_cloud(rng, 48)
        xc, yc = random_cloud(rng, 80), random_cloud(rng, 72)
        got = modified_chamfer(xp, y, xc, yc)
        want = brute_chamfer(xp.points, y.points, xc.points, yc.points)
        assert got == pytest.approx(want, abs=1e-12)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_brute_force_property(self, seed):
        r = np.random.default_rng(seed)
        sizes = r.integers(1, 40, size=4)
        clouds = [random_cloud(r, int(n)) for n in sizes]
        got = modified_chamfer(*clouds)
        want = brute_chamfer(*(c.points for c in clouds))
        assert got == pytest.approx(want, abs=1e-12)
        assert got >= 0.0


class TestEstimateNormals:
    def test_plane(self, rng):
        pts = np.zeros((64, 3))
        pts[:, :2] = rng.uniform(-1.0, 1.0, size=(64, 2))
        normals = estimate_normals(pts, k=8)
        np.testing.assert_allclose(np.abs(normals[:, 2]), 1.0, atol=1e-9)

    def test_sphere_radial(self):
        # Fibonacci lattice: evenly sampled unit sphere, so every k=10
        # neighborhood is a small regular cap
        n = 1024
        i = np.arange(n)
        golden = np.pi * (3.0 - np.sqrt(5.0))
        z = 1.0 - 2.0 * (i + 0.5) / n
        r = np.sqrt(1.0 - z * z)
        pts = np.stack([r * np.cos(golden * i), r * np.sin(golden * i), z],
                       axis=1)
        normals = estimate_normals(pts, k=10)
        cos = np.abs(np.einsum("nd,nd->n", normals, pts))
        worst_deg = np.rad2deg(np.arccos(np.clip(cos.min(), -1.0, 1.0)))
        assert worst_deg <= 5.0

    def test_colinear_flagged(self):
        pts = np.outer(np.linspace(0.0, 1.0, 8), [1.0, 2.0, 3.0])
        normals, flags = estimate_normals(pts, k=4, return_flags=True)
        assert flags.all()
        np.testing.assert_array_equal(normals, np.tile([0.0, 0.0, 1.0], (8, 1)))

    def test_rigid_invariance_up_to_sign(self, rng):
        pts = rng.normal(size=(128, 3))
        t = transform_of(rng)
        n1 = estimate_normals(pts, k=12)
        n2 = estimate_normals(t.apply_points(pts), k=12)
        dots = np.abs(np.einsum("nd,nd->n", n1 @ t.rotation.T, n2))
        assert np.all(dots >= 1.0 - 1e-6)

    def test_k_bounds(self, rng):
        with pytest.raises(GeomError):
            estimate_normals(rng.normal(size=(5, 3)), k=6)
