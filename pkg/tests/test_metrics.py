"""Centerline distance (D_cl) and landmark error (LD)."""

import numpy as np
import pytest

from ablreg.geometry import RigidTransform3D, rot_z
from ablreg.metrics import Centerline, LandmarkSet, centerline_distance, landmark_error


def line(points, frame="f"):
    return Centerline([np.asarray(points, float)], frame=frame)


def test_identical_centerlines_zero():
    a = line([[0, 0, 0], [10, 0, 0], [20, 5, 0]])
    mean, sd, d = centerline_distance(a, a)
    assert mean == 0.0 and sd == 0.0
    assert np.all(d == 0.0)


def test_parallel_lines_constant_distance():
    a = line([[0, 0, 0], [5, 0, 0], [10, 0, 0]])
    b = line([[0, 3, 0], [10, 3, 0]])
    mean, sd, _ = centerline_distance(a, b)
    assert mean == pytest.approx(3.0)
    assert sd == pytest.approx(0.0)


def test_single_point_polyline_rejected():
    with pytest.raises(ValueError):
        Centerline([np.array([[5.0, 1.0, 0.0]])], frame="f")  # needs >= 2 pts


def test_point_to_segment_not_vertex():
    # nearest point of b is mid-segment, far from both vertices
    a = line([[5, 1, 0], [5, 1, 1]])
    b = line([[0, 0, 0], [10, 0, 0]])
    mean, _, d = centerline_distance(a, b)
    assert d[0] == pytest.approx(1.0)  # vertex distance would be sqrt(26)


def test_brute_force_resampling_oracle():
    rng = np.random.default_rng(0)
    a = line(rng.uniform(0, 50, (8, 3)))
    b_pts = np.cumsum(rng.uniform(-5, 5, (12, 3)), axis=0) + 25.0
    b = line(b_pts)
    _, _, d = centerline_distance(a, b)
    # dense resampling of b at 0.01 mm
    dense = []
    for p, q in zip(b_pts[:-1], b_pts[1:]):
        n = max(int(np.ceil(np.linalg.norm(q - p) / 0.01)), 1)
        ts = np.linspace(0.0, 1.0, n + 1)
        dense.append(p + ts[:, None] * (q - p))
    dense = np.vstack(dense)
    for v, got in zip(a.vertices(), d):
        brute = np.min(np.linalg.norm(dense - v, axis=1))
        assert abs(got - brute) < 0.02


def test_frame_mismatch_rejected():
    a = line([[0, 0, 0], [1, 0, 0]], frame="x")
    b = line([[0, 0, 0], [1, 0, 0]], frame="y")
    with pytest.raises(ValueError):
        centerline_distance(a, b)


def test_symmetric_variant_includes_both_directions():
    a = line([[0, 0, 0], [10, 0, 0]])
    b = line([[0, 2, 0], [10, 2, 0], [20, 2, 0]])
    _, _, d = centerline_distance(a, b, symmetric=True)
    assert len(d) == 2 + 3


# ------------------------------------------------------------ landmarks


def test_identity_landmark_error_zero():
    a = LandmarkSet({"p": np.array([1.0, 2.0, 3.0]), "q": np.array([4.0, 5.0, 6.0])}, frame="f")
    mean, sd, per = landmark_error(a, a)
    assert mean == 0.0 and sd == 0.0
    assert per == {"p": 0.0, "q": 0.0}


def test_rigid_offset_landmark_error():
    a = LandmarkSet({"p": np.array([1.0, 2.0, 3.0]), "q": np.array([4.0, 5.0, 6.0])}, frame="f")
    shift = RigidTransform3D(np.eye(3), np.array([2.0, 0.0, 0.0]))
    b = LandmarkSet({k: v + [2.0, 0.0, 0.0] for k, v in a.landmarks.items()}, frame="f")
    mean, _, _ = landmark_error(a, b, mapping=shift)
    assert mean == pytest.approx(0.0, abs=1e-12)
    mean2, _, _ = landmark_error(a, b)
    assert mean2 == pytest.approx(2.0)


def test_no_common_names_rejected():
    a = LandmarkSet({"p": np.zeros(3)}, frame="f")
    b = LandmarkSet({"q": np.zeros(3)}, frame="f")
    with pytest.raises(ValueError):
        landmark_error(a, b)


def test_pairing_is_by_name_not_order():
    a = LandmarkSet({"p": np.array([0.0, 0, 0]), "q": np.array([10.0, 0, 0])}, frame="f")
    b = LandmarkSet({"q": np.array([10.0, 0, 0]), "p": np.array([0.0, 0, 0])}, frame="f")
    mean, _, _ = landmark_error(a, b)
    assert mean == 0.0


def test_landmark_error_after_rigid_cpd():
    """Noise-free registration closes the loop to sub-millimetre LD."""
    from ablreg.geometry import rotvec_to_matrix
    from ablreg.pointcloud import CpdConfig, PointCloud, extract_surface_points, register_rigid_cpd
    from ablreg.synth import synth_vessel_tree

    tree = synth_vessel_tree(seed=11, branches=5)
    cloud = extract_surface_points(tree.mask, target_count=1200)
    g = RigidTransform3D(rotvec_to_matrix(np.array([4.0, -6.0, 3.0])), np.array([8.0, -5.0, 10.0]))
    target = PointCloud(g.apply(cloud.points), frame="fixed")
    transform, _ = register_rigid_cpd(cloud, target, CpdConfig(outlier_weight=0.0))
    moved = LandmarkSet(
        {k: g.apply(v) for k, v in tree.landmarks.landmarks.items()}, frame="fixed"
    )
    mean, _, _ = landmark_error(tree.landmarks, moved, mapping=transform)
    assert mean < 1e-3
