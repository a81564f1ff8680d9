"""Deterministic synthetic scenes used as oracles across the toolkit:
bifurcating vessel trees, multimodal volume pairs, Z-bar calibration
sessions, and tracked 2D US sequences.

All generators are bit-reproducible under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import (
    RigidTransform3D,
    compose,
    inverse,
    random_rotation,
    rot_x,
    rot_y,
    rot_z,
    rotvec_to_matrix,
)
from .kinematics import DhChain, JointReading, dh_forward
from .metrics import Centerline, LandmarkSet, _point_to_segments
from .slice2volume import TrackedFrame
from .tps import TpsWarp, tps_apply
from .volume import SlicePose, Volume, mpr_slice
from .zbar import ZBarFiducial, ZBarObservation


# ---------------------------------------------------------------------------
# vessel trees


@dataclass
class VesselTree:
    mask: Volume
    centerline: Centerline
    landmarks: LandmarkSet
    segments: List[Tuple[np.ndarray, np.ndarray, float]]  # (start, end, radius)


def _tree_segments(rng: np.random.Generator, branches: int, extent: float):
    """Recursive bifurcating tube skeleton inside [0, extent]^3."""
    segments = []
    bifurcations = []
    root = np.array([extent / 2.0, extent / 2.0, extent * 0.08])
    direction = np.array([0.0, 0.0, 1.0])
    length = extent * 0.3
    radius = max(extent * 0.035, 1.5)
    tips = [(root, direction, length, radius)]
    for gen in range(branches):
        new_tips = []
        for start, d, ln, r in tips:
            end = start + d * ln
            segments.append((start, end, r))
            if gen == branches - 1:
                continue
            bifurcations.append(end)
            # two children splayed around the parent direction
            axis = rng.normal(size=3)
            axis -= axis @ d * d
            axis /= np.linalg.norm(axis)
            for sign in (1.0, -1.0):
                ang = rng.uniform(25.0, 40.0) * sign
                rot = rotvec_to_matrix(axis * ang)
                nd = rot @ d
                nd /= np.linalg.norm(nd)
                new_tips.append((end, nd, ln * 0.72, r * 0.75))
        tips = new_tips
    return segments, bifurcations


def _rasterize_tubes(
    segments, extent: float, spacing: float, modality: str = "MASK"
) -> Volume:
    n = int(round(extent / spacing)) + 1
    coords = np.arange(n) * spacing
    xx, yy, zz = np.meshgrid(coords, coords, coords, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    mask = np.zeros(len(pts), dtype=bool)
    for start, end, r in segments:
        lo = np.minimum(start, end) - (r + spacing)
        hi = np.maximum(start, end) + (r + spacing)
        sel = np.all((pts >= lo) & (pts <= hi), axis=1)
        if not sel.any():
            continue
        d = _point_to_segments(pts[sel], start[None, :], end[None, :])
        sub = mask[sel]
        sub |= d <= r
        mask[sel] = sub
    scalars = mask.reshape(n, n, n).astype(np.uint8)
    return Volume(scalars=scalars, spacing=np.full(3, spacing), origin=np.zeros(3),
                  direction=np.eye(3), modality=modality)


def _segments_to_polylines(segments, n_sub: int = 6):
    polylines = []
    for start, end, _ in segments:
        t = np.linspace(0.0, 1.0, n_sub)[:, None]
        polylines.append(start[None, :] * (1 - t) + end[None, :] * t)
    return tuple(polylines)


def synth_vessel_tree(
    seed: int, branches: int, extent: float = 100.0, spacing: float = 1.0, frame: str = "fixed"
) -> VesselTree:
    """Deterministic bifurcating tube tree rasterized into a binary mask,
    with analytic centrelines and bifurcation landmarks."""
    if branches < 1:
        raise ValueError("branches must be >= 1")
    rng = np.random.default_rng(seed)
    segments, bifs = _tree_segments(rng, branches, extent)
    mask = _rasterize_tubes(segments, extent, spacing)
    centerline = Centerline(_segments_to_polylines(segments), frame=frame)
    landmarks = LandmarkSet({f"bif_{i}": p for i, p in enumerate(bifs)}, frame=frame)
    return VesselTree(mask=mask, centerline=centerline, landmarks=landmarks, segments=segments)


# ---------------------------------------------------------------------------
# multimodal volume pairs

Deformation = Union[None, RigidTransform3D, TpsWarp, Callable[[np.ndarray], np.ndarray]]


def _apply_deformation(deformation: Deformation, pts: np.ndarray) -> np.ndarray:
    if deformation is None:
        return np.asarray(pts, dtype=float)
    if isinstance(deformation, RigidTransform3D):
        return deformation.apply(pts)
    if isinstance(deformation, TpsWarp):
        return tps_apply(deformation, pts)
    return np.asarray(deformation(pts), dtype=float)


def _render_intensity(
    segments, extent, spacing, style: str, rng: Optional[np.random.Generator], speckle_sigma: float
) -> Volume:
    mask_vol = _rasterize_tubes(segments, extent, spacing)
    m = mask_vol.scalars.astype(np.float32)
    if style == "us":
        # tube-bright, speckled
        img = 0.18 + 0.72 * gaussian_filter(m, sigma=0.8)
        if rng is not None and speckle_sigma > 0:
            img = img * rng.lognormal(mean=0.0, sigma=speckle_sigma, size=img.shape).astype(np.float32)
        img = np.clip(img, 0.0, 2.0).astype(np.float32)
        modality = "US3D"
    elif style == "mri":
        # tube-dark, smooth
        img = (0.75 - 0.6 * gaussian_filter(m, sigma=1.2)).astype(np.float32)
        modality = "MRI"
    else:
        raise ValueError(f"unknown render style {style!r}")
    return Volume(scalars=img, spacing=mask_vol.spacing, origin=mask_vol.origin,
                  direction=mask_vol.direction, modality=modality)


@dataclass
class MultimodalPair:
    fixed_volume: Volume
    fixed_mask: Volume
    fixed_centerline: Centerline
    fixed_landmarks: LandmarkSet
    moving_volume: Volume
    moving_mask: Volume
    moving_centerline: Centerline
    moving_landmarks: LandmarkSet
    ground_truth: Deformation  # maps MOVING coordinates into the FIXED frame


def synth_multimodal_pair(
    seed: int,
    deformation: Deformation = None,
    speckle_sigma: float = 0.2,
    branches: int = 4,
    extent: float = 100.0,
    spacing: float = 1.0,
) -> MultimodalPair:
    """Same vessel tree under two intensity mappings: the moving side is the
    US-like speckled rendering of the canonical tree; the fixed side is the
    MRI-like rendering of the tree mapped through the supplied ground-truth
    deformation. ground_truth maps moving coordinates into the fixed frame."""
    rng = np.random.default_rng(seed)
    tree = synth_vessel_tree(seed, branches, extent, spacing, frame="moving")
    moving_segments = tree.segments
    fixed_segments = [
        (_apply_deformation(deformation, s), _apply_deformation(deformation, e), r)
        for s, e, r in moving_segments
    ]
    moving_volume = _render_intensity(moving_segments, extent, spacing, "us", rng, speckle_sigma)
    fixed_volume = _render_intensity(fixed_segments, extent, spacing, "mri", None, 0.0)
    fixed_mask = _rasterize_tubes(fixed_segments, extent, spacing)
    fixed_centerline = Centerline(_segments_to_polylines(fixed_segments), frame="fixed")
    fixed_landmarks = LandmarkSet(
        {k: _apply_deformation(deformation, v) for k, v in tree.landmarks.landmarks.items()},
        frame="fixed",
    )
    gt = deformation if deformation is not None else RigidTransform3D.identity()
    return MultimodalPair(
        fixed_volume=fixed_volume,
        fixed_mask=fixed_mask,
        fixed_centerline=fixed_centerline,
        fixed_landmarks=fixed_landmarks,
        moving_volume=moving_volume,
        moving_mask=tree.mask,
        moving_centerline=tree.centerline,
        moving_landmarks=tree.landmarks,
        ground_truth=gt,
    )


# ---------------------------------------------------------------------------
# Z-bar calibration sessions


def default_phantom_fiducials(
    layers: int = 3, per_layer: int = 5, layer_spacing: float = 20.0
) -> List[ZBarFiducial]:
    """Parameterized string-phantom geometry: `layers` wire layers with
    `per_layer` Z-bars each. NOT a published phantom geometry; a stand-in
    with the same topology (Z-bars of two parallel wires plus a diagonal)."""
    fids = []
    fid = 0
    for l in range(layers):
        z = 20.0 + l * layer_spacing
        for k in range(per_layer):
            y = 15.0 + k * 18.0
            a = np.array([-25.0, y, z])
            b = np.array([25.0, y, z])
            c = np.array([-25.0, y + 10.0, z])
            d = np.array([25.0, y + 10.0, z])
            fids.append(ZBarFiducial(fid, a, b, c, d))
            fid += 1
    return fids


def _intersect_wire_with_plane(p1_w, p2_w, plane: RigidTransform3D):
    """Intersection of segment p1-p2 with the plane z=0 of the given image
    frame. Returns 2D image coordinates, or None if parallel/no crossing."""
    inv = inverse(plane)
    e1 = inv.apply(p1_w)
    e2 = inv.apply(p2_w)
    dz = e2[2] - e1[2]
    if abs(dz) < 1e-9:
        return None
    s = -e1[2] / dz
    if s < -1e-9 or s > 1 + 1e-9:
        return None
    p = e1 + s * (e2 - e1)
    return p[:2]


def analytic_zbar_observation(
    fiducial: ZBarFiducial, plane: RigidTransform3D
) -> Optional[ZBarObservation]:
    """Oracle: analytic wire/plane intersections for one fiducial. None when
    the plane misses a wire or is (near-)parallel to the layer."""
    p1 = _intersect_wire_with_plane(fiducial.a, fiducial.b, plane)
    p2 = _intersect_wire_with_plane(fiducial.b, fiducial.c, plane)
    p3 = _intersect_wire_with_plane(fiducial.c, fiducial.d, plane)
    if p1 is None or p2 is None or p3 is None:
        return None
    if np.linalg.norm(p3 - p1) < 0.5:
        return None
    return ZBarObservation(fiducial.fiducial_id, p1, p2, p3)


def default_test_chain() -> DhChain:
    """3-joint revolute chain used by the synthetic calibration scenes."""
    return DhChain(
        theta_offset=np.array([0.0, 12.0, -8.0]),
        d=np.array([120.0, 25.0, 30.0]),
        a=np.array([80.0, 100.0, 60.0]),
        alpha=np.array([90.0, 45.0, -90.0]),
        joint_kinds=("revolute", "revolute", "revolute"),
    )


def synth_zbar_session(
    seed: int,
    chain: Optional[DhChain] = None,
    n_poses: int = 25,
    n_probe_stations: int = 12,
    noise_translation_mm: float = 0.0,
    noise_rotation_deg: float = 0.0,
    noise_image_mm: float = 0.0,
) -> dict:
    """Full synthetic calibration session (JSON-serializable dict).

    Contains the arm part (readings + tracker-measured end poses) and the
    probe part (tracked end poses + analytic Z-bar observations), plus a
    "truth" section with the generating ground truth for verification.
    """
    rng = np.random.default_rng(seed)
    chain = chain or default_test_chain()
    fiducials = default_phantom_fiducials()

    # arm observations
    readings = [rng.uniform(-60.0, 60.0, size=chain.n_joints) for _ in range(n_poses)]
    measured, measured_true = [], []
    for rd in readings:
        pose = dh_forward(chain, JointReading(rd))
        measured_true.append(pose)
        measured.append(_noisy_pose(pose, rng, noise_translation_mm, noise_rotation_deg))

    # probe part: ground-truth hand-eye X; the phantom pose W (F_vol in F_1)
    # is chosen so that a nominal joint posture images the middle of the
    # phantom: V0 = W^-1 E(rb) X  =>  W = E(rb) X V0^-1
    x_true = RigidTransform3D(
        rot_z(7.0) @ rot_x(-5.0), np.array([12.0, -4.0, 55.0])
    )
    # canonical plane: image x along phantom +y, image y along +z, normal +x
    r0 = np.column_stack([np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])])
    v0 = RigidTransform3D(r0, np.array([0.0, -30.0, 20.0]))
    rb = np.linspace(15.0, 30.0, chain.n_joints)
    e0 = dh_forward(chain, JointReading(rb))
    w_true = compose(compose(e0, x_true), inverse(v0))
    w_inv = inverse(w_true)

    stations = []
    plane_poses_true = []
    end_poses_true = []
    made = 0
    attempts = 0
    while made < n_probe_stations and attempts < n_probe_stations * 40:
        attempts += 1
        rd = rb + rng.uniform(-8.0, 8.0, size=chain.n_joints)
        end_pose = dh_forward(chain, JointReading(rd))
        plane = compose(w_inv, compose(end_pose, x_true))  # V = W^-1 E X
        obs = []
        skipped = []
        for f in fiducials:
            o = analytic_zbar_observation(f, plane)
            if o is None:
                skipped.append({"fiducial_id": f.fiducial_id, "reason": "degenerate-or-missed"})
            else:
                if noise_image_mm > 0:
                    # jitter endpoints in-plane; keep p2 on the p1-p3 line
                    # (shift its parameter along the segment) so the
                    # observation stays self-consistent
                    p1 = o.p1 + rng.normal(0, noise_image_mm, 2)
                    p3 = o.p3 + rng.normal(0, noise_image_mm, 2)
                    span = np.linalg.norm(o.p3 - o.p1)
                    s = np.linalg.norm(o.p2 - o.p1) / span
                    s = s + rng.normal(0, noise_image_mm / max(span, 1e-6))
                    s = min(max(s, 0.02), 0.98)
                    o = ZBarObservation(o.fiducial_id, p1, p1 + s * (p3 - p1), p3)
                obs.append(o)
        if len(obs) < 4:
            continue
        measured_end = _noisy_pose(end_pose, rng, noise_translation_mm, noise_rotation_deg)
        stations.append(
            {
                "reading": [float(v) for v in rd],
                "end_pose": measured_end.to_json_dict()["matrix"],
                "observations": [
                    {
                        "fiducial_id": o.fiducial_id,
                        "p1": o.p1.tolist(),
                        "p2": o.p2.tolist(),
                        "p3": o.p3.tolist(),
                    }
                    for o in obs
                ],
                "skipped": skipped,
            }
        )
        plane_poses_true.append(plane)
        end_poses_true.append(end_pose)
        made += 1

    # calibration starting points: perturbed DH parameters and a nominal
    # (slightly off) probe mount transform
    n = chain.n_joints
    scale = np.concatenate([np.full(n, 2.0), np.full(n, 3.0), np.full(n, 3.0), np.full(n, 2.0)])
    chain_init = chain.with_params_vector(
        chain.params_vector() + rng.uniform(-1.0, 1.0, 4 * n) * scale
    )
    probe_nominal = RigidTransform3D(
        rotvec_to_matrix(rng.uniform(-2.0, 2.0, size=3)) @ x_true.rotation,
        x_true.translation + rng.uniform(-3.0, 3.0, size=3),
    )

    return {
        "chain_init": chain_init.to_json_dict(),
        "probe_nominal": probe_nominal.to_json_dict()["matrix"],
        "readings": [list(map(float, rd)) for rd in readings],
        "measured_poses": [p.to_json_dict()["matrix"] for p in measured],
        "zbar_fiducials": [
            {
                "id": f.fiducial_id,
                "A": f.a.tolist(),
                "B": f.b.tolist(),
                "C": f.c.tolist(),
                "D": f.d.tolist(),
            }
            for f in fiducials
        ],
        "probe_stations": stations,
        "truth": {
            "chain": chain.to_json_dict(),
            "probe_cal": x_true.to_json_dict()["matrix"],
            "phantom_pose": w_true.to_json_dict()["matrix"],
            "plane_poses": [p.to_json_dict()["matrix"] for p in plane_poses_true],
            "end_poses": [p.to_json_dict()["matrix"] for p in end_poses_true],
            "measured_poses_true": [p.to_json_dict()["matrix"] for p in measured_true],
        },
        "units": {"length": "mm", "angle": "deg"},
    }


def _noisy_pose(pose: RigidTransform3D, rng, sigma_t: float, sigma_r_deg: float) -> RigidTransform3D:
    if sigma_t == 0 and sigma_r_deg == 0:
        return pose
    dr = rotvec_to_matrix(rng.normal(0.0, sigma_r_deg, size=3))
    dt = rng.normal(0.0, sigma_t, size=3)
    return RigidTransform3D(dr @ pose.rotation, pose.translation + dt)


# ---------------------------------------------------------------------------
# tracked 2D US sequences


def synth_tracked_sequence(
    volume: Volume,
    seed: int,
    n_frames: int,
    base_pose: SlicePose,
    drift_amplitude_mm: float = 8.0,
    drift_period_frames: float = 30.0,
    tracked_noise_translation_mm: float = 0.0,
    tracked_noise_rotation_deg: float = 0.0,
    speckle_sigma: float = 0.0,
) -> Tuple[List[TrackedFrame], List[SlicePose]]:
    """Frames sliced from the volume along a sinusoidal breathing-like drift
    of the true pose; tracked poses carry configurable noise. Returns
    (frames, true poses)."""
    rng = np.random.default_rng(seed)
    frames: List[TrackedFrame] = []
    truths: List[SlicePose] = []
    drift_dir = volume.direction[:, 2]
    for i in range(n_frames):
        offset = drift_amplitude_mm * np.sin(2.0 * np.pi * i / drift_period_frames)
        true_tf = compose(
            RigidTransform3D(np.eye(3), drift_dir * offset), base_pose.transform
        )
        true_pose = SlicePose(true_tf, base_pose.extent, base_pose.resolution)
        nu, nv = true_pose.resolution
        img, _ = mpr_slice(volume, SlicePose(true_tf, base_pose.extent, (nu, nv)))
        if speckle_sigma > 0:
            img = img * rng.lognormal(0.0, speckle_sigma, size=img.shape)
        tracked_tf = _noisy_pose(true_tf, rng, tracked_noise_translation_mm, tracked_noise_rotation_deg)
        frames.append(
            TrackedFrame(
                image=img,
                spacing=(base_pose.extent[0] / (nu - 1), base_pose.extent[1] / (nv - 1)),
                timestamp=float(i),
                tracked_pose=SlicePose(tracked_tf, base_pose.extent, base_pose.resolution),
            )
        )
        truths.append(true_pose)
    return frames, truths


# ---------------------------------------------------------------------------
# pipeline-scale helpers


def synth_ellipsoid_mask(extent: float = 100.0, spacing: float = 1.0) -> Volume:
    """Liver-stand-in mask: ellipsoid filling most of the scene."""
    n = int(round(extent / spacing)) + 1
    coords = np.arange(n) * spacing
    xx, yy, zz = np.meshgrid(coords, coords, coords, indexing="ij")
    c = extent / 2.0
    semi = np.array([0.46, 0.42, 0.46]) * extent
    inside = (
        ((xx - c) / semi[0]) ** 2 + ((yy - c) / semi[1]) ** 2 + ((zz - c) / semi[2]) ** 2
    ) <= 1.0
    return Volume(
        scalars=inside.astype(np.uint8),
        spacing=np.full(3, spacing),
        origin=np.zeros(3),
        direction=np.eye(3),
        modality="MASK",
    )


def synth_smooth_deformation(
    seed: int,
    extent: float = 100.0,
    magnitude_mm: float = 6.0,
    rigid_rotation_deg: float = 10.0,
    rigid_translation_mm: float = 15.0,
    n_interior: int = 6,
):
    """Ground-truth deformation g(y) = rigid(tps_local(y)).

    The local TPS part pins the scene boundary (corners and face centers
    have zero displacement) and displaces a few interior points by up to
    magnitude_mm, so the non-rigid component decays toward the edges.
    Returns (g as a callable, rigid part, local TPS part)."""
    from .tps import tps_fit

    rng = np.random.default_rng(seed + 1000)
    lo, hi = 0.0, extent
    corners = np.array([[x, y, z] for x in (lo, hi) for y in (lo, hi) for z in (lo, hi)])
    mid = extent / 2.0
    faces = np.array(
        [
            [lo, mid, mid], [hi, mid, mid],
            [mid, lo, mid], [mid, hi, mid],
            [mid, mid, lo], [mid, mid, hi],
        ]
    )
    interior = rng.uniform(0.28 * extent, 0.72 * extent, size=(n_interior, 3))
    sources = np.vstack([corners, faces, interior])
    disp = np.zeros_like(sources)
    v = rng.normal(size=(n_interior, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    disp[len(corners) + len(faces):] = v * rng.uniform(0.5, 1.0, size=(n_interior, 1)) * magnitude_mm
    tps_part = tps_fit(sources, sources + disp)

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    r = rotvec_to_matrix(axis * rigid_rotation_deg)
    tdir = rng.normal(size=3)
    tdir /= np.linalg.norm(tdir)
    center = np.full(3, mid)
    rigid_part = RigidTransform3D(r, center - r @ center + tdir * rigid_translation_mm)

    def g(points):
        return rigid_part.apply(tps_apply(tps_part, points))

    return g, rigid_part, tps_part
