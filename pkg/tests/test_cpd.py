"""Surface point extraction and rigid CPD registration."""

import numpy as np
import pytest

from ablreg.geometry import RigidTransform3D, compose, inverse, pose_error, rotvec_to_matrix
from ablreg.pointcloud import (
    CpdConfig,
    PointCloud,
    extract_surface_points,
    register_rigid_cpd,
)
from ablreg.synth import synth_vessel_tree
from ablreg.volume import Volume


def mask_volume(arr):
    return Volume(
        scalars=np.asarray(arr, np.uint8),
        spacing=np.ones(3),
        origin=np.zeros(3),
        direction=np.eye(3),
        modality="MASK",
    )


# ------------------------------------------------- surface extraction


def test_single_voxel_single_point():
    arr = np.zeros((5, 5, 5), np.uint8)
    arr[2, 3, 1] = 1
    cloud = extract_surface_points(mask_volume(arr), target_count=100)
    assert cloud.points.shape == (1, 3)
    assert np.allclose(cloud.points[0], [2.0, 3.0, 1.0])


def test_solid_cube_shell_count():
    arr = np.zeros((14, 14, 14), np.uint8)
    arr[2:12, 2:12, 2:12] = 1
    cloud = extract_surface_points(mask_volume(arr), target_count=10_000)
    assert len(cloud.points) == 10**3 - 8**3  # 488 shell voxels


def test_sphere_radius_bound():
    n = 45
    c = (n - 1) / 2.0
    ix = np.arange(n)
    xx, yy, zz = np.meshgrid(ix, ix, ix, indexing="ij")
    r = np.sqrt((xx - c) ** 2 + (yy - c) ** 2 + (zz - c) ** 2)
    cloud = extract_surface_points(mask_volume((r <= 20.0).astype(np.uint8)), target_count=10_000)
    d = np.linalg.norm(cloud.points - c, axis=1)
    vox_diag = np.sqrt(3.0)
    assert np.all(np.abs(d - 20.0) <= vox_diag)


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        extract_surface_points(mask_volume(np.zeros((4, 4, 4), np.uint8)))


def test_extraction_deterministic():
    tree = synth_vessel_tree(seed=3, branches=6)
    a = extract_surface_points(tree.mask, target_count=500)
    b = extract_surface_points(tree.mask, target_count=500)
    assert np.array_equal(a.points, b.points)
    assert len(a.points) <= 500


# ------------------------------------------------- rigid CPD


def vessel_cloud(seed=0, target_count=3000):
    tree = synth_vessel_tree(seed=seed, branches=6)
    return extract_surface_points(tree.mask, target_count=target_count)


def offset_transform(rng, angle_deg=15.0, t_mm=20.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    t = rng.normal(size=3)
    t = t / np.linalg.norm(t) * t_mm
    return RigidTransform3D(rotvec_to_matrix(axis * angle_deg), t)


def test_identity_on_self():
    cloud = vessel_cloud(seed=1, target_count=800)
    transform, diag = register_rigid_cpd(cloud, cloud, CpdConfig(outlier_weight=0.0))
    err = pose_error(transform, RigidTransform3D.identity())
    assert err.euclidean_distance < 1e-6
    assert err.geodesic_angle < 1e-6
    assert diag.converged


def test_noise_free_recovery():
    rng = np.random.default_rng(2)
    cloud = vessel_cloud(seed=2, target_count=1000)
    g = offset_transform(rng)
    target = PointCloud(g.apply(cloud.points), frame="t")
    transform, diag = register_rigid_cpd(cloud, target, CpdConfig(outlier_weight=0.0))
    err = pose_error(transform, g)
    assert err.euclidean_distance < 1e-3
    assert err.geodesic_angle < 1e-3
    assert diag.monotone


def test_noisy_outliers_residual():
    rng = np.random.default_rng(3)
    cloud = vessel_cloud(seed=3)
    g = offset_transform(rng)
    moved = g.apply(cloud.points) + rng.normal(0.0, 1.0, cloud.points.shape)
    lo, hi = moved.min(axis=0), moved.max(axis=0)
    outliers = rng.uniform(lo, hi, (len(moved) // 10, 3))
    target = PointCloud(np.vstack([moved, outliers]), frame="t")
    transform, diag = register_rigid_cpd(cloud, target, CpdConfig(outlier_weight=0.1))
    from scipy.spatial import cKDTree

    mapped = transform.apply(cloud.points)
    d, _ = cKDTree(g.apply(cloud.points)).query(mapped)
    assert float(np.mean(d)) < 2.0
    assert diag.monotone


def test_loglik_trace_monotone():
    rng = np.random.default_rng(4)
    cloud = vessel_cloud(seed=4, target_count=1500)
    g = offset_transform(rng)
    target = PointCloud(
        g.apply(cloud.points) + rng.normal(0.0, 1.0, cloud.points.shape), frame="t"
    )
    _, diag = register_rigid_cpd(cloud, target, CpdConfig(outlier_weight=0.1))
    trace = np.asarray(diag.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-9)
    assert diag.monotone


def test_planar_cloud_no_reflection():
    """Adversarial coplanar clouds must still yield a proper rotation."""
    rng = np.random.default_rng(5)
    pts = np.column_stack([rng.uniform(-40, 40, 300), rng.uniform(-40, 40, 300), np.zeros(300)])
    g = offset_transform(rng, angle_deg=10.0, t_mm=10.0)
    transform, _ = register_rigid_cpd(
        PointCloud(pts, frame="s"), PointCloud(g.apply(pts), frame="t"), CpdConfig(outlier_weight=0.0)
    )
    assert np.linalg.det(transform.rotation) > 0.0


def test_equivariance_property():
    """T' for (G src -> G tgt) equals G o T o G^-1 within 1e-4."""
    rng = np.random.default_rng(6)
    cloud = vessel_cloud(seed=6, target_count=600)
    g_true = offset_transform(rng, angle_deg=12.0, t_mm=15.0)
    target = PointCloud(
        g_true.apply(cloud.points) + rng.normal(0.0, 0.5, cloud.points.shape), frame="t"
    )
    cfg = CpdConfig(outlier_weight=0.0)
    t_base, _ = register_rigid_cpd(cloud, target, cfg)
    for seed in range(3):
        rng_g = np.random.default_rng(100 + seed)
        g = offset_transform(rng_g, angle_deg=25.0, t_mm=30.0)
        t_conj, _ = register_rigid_cpd(
            PointCloud(g.apply(cloud.points), frame="s"),
            PointCloud(g.apply(target.points), frame="t"),
            cfg,
        )
        expected = compose(compose(g, t_base), inverse(g))
        err = pose_error(t_conj, expected)
        assert err.euclidean_distance < 1e-4
        assert err.geodesic_angle < 1e-4


def test_sigma2_collapse_sets_converged():
    # 4 exactly matching points: sigma^2 goes to zero fast
    pts = np.array([[0, 0, 0], [10, 0, 0], [0, 10, 0], [0, 0, 10]], float)
    _, diag = register_rigid_cpd(
        PointCloud(pts, frame="s"), PointCloud(pts, frame="t"), CpdConfig(outlier_weight=0.0)
    )
    assert diag.converged


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        CpdConfig(outlier_weight=1.0)
    with pytest.raises(ValueError):
        CpdConfig(outlier_weight=-0.1)


def test_too_few_points_rejected():
    tiny = PointCloud(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), frame="s")
    big = PointCloud(np.eye(4, 3) * 10.0, frame="t")
    with pytest.raises(ValueError):
        register_rigid_cpd(tiny, big)
