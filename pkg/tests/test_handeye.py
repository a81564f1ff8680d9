"""Hand-eye calibration (Tsai-Lenz)."""

import numpy as np
import pytest

from ablreg.geometry import RigidTransform3D, compose, inverse, pose_error
from ablreg.handeye import DegenerateMotionError, HandEyeProblem, calibrate_probe
from conftest import random_rotation_from_quat, random_transform


def random_motions(rng, n, angle_scale=40.0, t_scale=30.0):
    out = []
    for _ in range(n):
        r = random_rotation_from_quat(rng)
        # rescale toward moderate angles so axes stay well-separated
        out.append(RigidTransform3D(r, rng.uniform(-t_scale, t_scale, 3)))
    return out


def consistent_pairs(x, motions_a):
    """B_i = X^-1 A_i X so that A_i X = X B_i exactly."""
    xi = inverse(x)
    return [compose(compose(xi, a), x) for a in motions_a]


def test_identity_x_with_equal_motions():
    rng = np.random.default_rng(0)
    a = random_motions(rng, 3)
    res = calibrate_probe(HandEyeProblem(tuple(a), tuple(a)))
    err = pose_error(res.x, RigidTransform3D.identity())
    assert err.euclidean_distance < 1e-10
    assert err.geodesic_angle < 1e-10


def test_recovers_random_x_noise_free():
    rng = np.random.default_rng(1)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x_true = random_transform(rng)
        a = random_motions(rng, 5)
        b = consistent_pairs(x_true, a)
        res = calibrate_probe(HandEyeProblem(tuple(a), tuple(b)))
        err = pose_error(res.x, x_true)
        assert err.euclidean_distance < 1e-8
        assert err.geodesic_angle < 1e-8
        assert res.max_residual_ed_mm < 1e-8
        assert res.max_residual_ga_deg < 1e-8


def test_noisy_pairs_monte_carlo():
    from ablreg.synth import _noisy_pose

    rng = np.random.default_rng(42)
    x_true = random_transform(rng)
    a = random_motions(rng, 20)
    b = [_noisy_pose(bi, rng, 0.1, 0.1) for bi in consistent_pairs(x_true, a)]
    res = calibrate_probe(HandEyeProblem(tuple(a), tuple(b)))
    err = pose_error(res.x, x_true)
    assert err.euclidean_distance < 0.5
    assert err.geodesic_angle < 0.2


def test_parallel_axes_degenerate():
    from ablreg.geometry import rot_z

    a = [RigidTransform3D(rot_z(ang), np.array([ang, 0.0, 0.0])) for ang in (10.0, 25.0, 40.0)]
    with pytest.raises(DegenerateMotionError):
        HandEyeProblem(tuple(a), tuple(a))


def test_too_few_pairs():
    rng = np.random.default_rng(3)
    a = random_motions(rng, 1)
    with pytest.raises(ValueError):
        HandEyeProblem(tuple(a), tuple(a))


def test_from_absolute_poses_consistency():
    """Absolute end/content pose lists reduce to pairs satisfying A X = X B."""
    rng = np.random.default_rng(9)
    x_true = random_transform(rng)
    end_poses = random_motions(rng, 6, t_scale=80.0)
    # content pose per station: C_i = (E_i X)^-1 W for a fixed world content W
    w = random_transform(rng)
    content = [compose(inverse(compose(e, x_true)), w) for e in end_poses]
    prob = HandEyeProblem.from_absolute_poses(end_poses, content)
    for a, b in zip(prob.motions_a, prob.motions_b):
        err = pose_error(compose(a, x_true), compose(x_true, b))
        assert err.euclidean_distance < 1e-9
        assert err.geodesic_angle < 1e-9
    res = calibrate_probe(prob)
    err = pose_error(res.x, x_true)
    assert err.euclidean_distance < 1e-8
