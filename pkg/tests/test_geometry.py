"""Rigid transform algebra and pose-error decomposition."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ablreg.geometry import (
    RigidTransform3D,
    compose,
    euler_xyz_fixed,
    inverse,
    matrix_to_rotvec,
    pose_error,
    rot_x,
    rot_y,
    rot_z,
    rotvec_to_matrix,
)

from conftest import random_rotation_from_quat, random_transform


def test_identity_compose():
    t = RigidTransform3D(rot_z(30.0), np.array([1.0, 2.0, 3.0]))
    out = compose(RigidTransform3D.identity(), t)
    assert np.allclose(out.matrix(), t.matrix())


def test_compose_with_inverse_is_identity():
    rng = np.random.default_rng(0)
    t = random_transform(rng)
    out = compose(t, inverse(t))
    assert np.allclose(out.matrix(), np.eye(4), atol=1e-12)


def test_planar_rotation_addition():
    out = compose(
        RigidTransform3D(rot_z(30.0), np.zeros(3)),
        RigidTransform3D(rot_z(60.0), np.zeros(3)),
    )
    assert np.allclose(out.rotation, rot_z(90.0), atol=1e-12)


def test_inverse_identity():
    assert np.allclose(inverse(RigidTransform3D.identity()).matrix(), np.eye(4))


def test_inverse_translation():
    t = RigidTransform3D(np.eye(3), np.array([1.0, 2.0, 3.0]))
    assert np.allclose(inverse(t).translation, [-1.0, -2.0, -3.0])


def test_inverse_involution_100_random():
    rng = np.random.default_rng(7)
    for _ in range(100):
        t = random_transform(rng)
        back = inverse(inverse(t))
        assert np.allclose(back.matrix(), t.matrix(), atol=1e-12)


def test_rejects_non_orthonormal():
    bad = np.eye(3)
    bad[0, 0] = 1.01
    with pytest.raises(ValueError):
        RigidTransform3D(bad, np.zeros(3))


def test_rejects_reflection():
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        RigidTransform3D(refl, np.zeros(3))


def test_json_round_trip():
    rng = np.random.default_rng(3)
    t = random_transform(rng)
    back = RigidTransform3D.from_json_dict(t.to_json_dict())
    assert np.allclose(back.matrix(), t.matrix(), atol=1e-12)


def test_apply_matches_matrix_product():
    rng = np.random.default_rng(4)
    t = random_transform(rng)
    pts = rng.uniform(-10, 10, (20, 3))
    hom = np.c_[pts, np.ones(20)] @ t.matrix().T
    assert np.allclose(t.apply(pts), hom[:, :3], atol=1e-12)


# ------------------------------------------------------------- pose error


def test_pose_error_identical_is_zero():
    rng = np.random.default_rng(5)
    t = random_transform(rng)
    e = pose_error(t, t)
    assert (e.tx, e.ty, e.tz, e.euclidean_distance) == (0.0, 0.0, 0.0, 0.0)
    assert (e.rx, e.ry, e.rz, e.geodesic_angle) == (0.0, 0.0, 0.0, 0.0)


def test_pose_error_345_translation():
    a = RigidTransform3D(np.eye(3), np.array([3.0, 4.0, 0.0]))
    b = RigidTransform3D(np.eye(3), np.zeros(3))
    e = pose_error(a, b)
    assert e.euclidean_distance == pytest.approx(5.0)
    assert e.geodesic_angle == pytest.approx(0.0)


def test_pose_error_rotation_about_z():
    a = RigidTransform3D(rot_z(10.0), np.zeros(3))
    b = RigidTransform3D.identity()
    e = pose_error(a, b)
    assert e.geodesic_angle == pytest.approx(10.0, abs=1e-10)
    assert e.rz == pytest.approx(10.0, abs=1e-10)
    assert e.euclidean_distance == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_geodesic_angle_left_composition_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b, g = (random_transform(rng) for _ in range(3))
    base = pose_error(a, b).geodesic_angle
    moved = pose_error(compose(g, a), compose(g, b)).geodesic_angle
    assert moved == pytest.approx(base, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_compose_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_transform(rng) for _ in range(3))
    lhs = compose(compose(a, b), c)
    rhs = compose(a, compose(b, c))
    assert np.allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)


def test_rotvec_round_trip():
    rng = np.random.default_rng(9)
    for _ in range(50):
        r = random_rotation_from_quat(rng)
        back = rotvec_to_matrix(matrix_to_rotvec(r))
        assert np.allclose(back, r, atol=1e-10)


def test_euler_xyz_fixed_reconstructs():
    rng = np.random.default_rng(11)
    for _ in range(50):
        r = random_rotation_from_quat(rng)
        ax, ay, az = euler_xyz_fixed(r)
        rebuilt = rot_z(az) @ rot_y(ay) @ rot_x(ax)
        assert np.allclose(rebuilt, r, atol=1e-9)
