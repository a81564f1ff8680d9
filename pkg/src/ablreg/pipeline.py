"""End-to-end pipeline: rigid cloud alignment, optional interactive TPS
refinement (replayed or oracle-guided), slice-to-volume tracking, fused
MPR output, and the metrics CSV.

Stages mirror the registration workflow: (a) rigid 3D US - CT/MRI,
(b) non-rigid refinement, (c) rigid 2D-3D US + MPR.
"""

from __future__ import annotations

import json
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from .geometry import RigidTransform3D, compose, inverse, rotvec_to_matrix
from .metrics import Centerline, LandmarkSet, centerline_distance, landmark_error
from .nrrd_io import read_nrrd, write_nrrd
from .pointcloud import CpdConfig, extract_surface_points, register_rigid_cpd
from .slice2volume import S2VOptions, mpr_chain, register_sequence
from .synth import (
    MultimodalPair,
    synth_ellipsoid_mask,
    synth_multimodal_pair,
    synth_smooth_deformation,
    synth_tracked_sequence,
)
from .tps import (
    ControlPointSet,
    OrientedBox,
    TpsWarp,
    drag_update,
    generate_control_points,
    tps_apply,
    warp_from_control_points,
)
from .volume import SlicePose, Volume, fused_mvr_view, fused_view_to_rgba, save_png


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineResult:
    success: bool
    stages_run: List[str]
    metrics: dict
    outputs: dict
    errors: List[str]


@dataclass
class Case:
    pair: MultimodalPair
    liver_mask: Volume
    workspace: OrientedBox
    seed: int


def build_synthetic_case(cfg: dict) -> Case:
    seed = int(cfg.get("seed", 0))
    extent = float(cfg.get("extent", 100.0))
    spacing = float(cfg.get("spacing", 1.0))
    deformation, rigid_part, tps_part = synth_smooth_deformation(
        seed=seed,
        extent=extent,
        magnitude_mm=float(cfg.get("deform_magnitude_mm", 6.0)),
        rigid_rotation_deg=float(cfg.get("rigid_rotation_deg", 10.0)),
        rigid_translation_mm=float(cfg.get("rigid_translation_mm", 15.0)),
    )
    if cfg.get("identity", False):
        deformation = None
    pair = synth_multimodal_pair(
        seed=seed,
        deformation=deformation,
        speckle_sigma=float(cfg.get("speckle_sigma", 0.2)),
        branches=int(cfg.get("branches", 4)),
        extent=extent,
        spacing=spacing,
    )
    liver = synth_ellipsoid_mask(extent, spacing)
    ws = OrientedBox(
        center=np.full(3, extent / 2.0),
        axes=np.eye(3),
        half_sizes=np.full(3, extent * float(cfg.get("workspace_frac", 0.38))),
    )
    return Case(pair=pair, liver_mask=liver, workspace=ws, seed=seed)


def load_case(config: dict) -> Case:
    if "synthetic" in config:
        return build_synthetic_case(config["synthetic"])
    inputs = config.get("inputs")
    if not inputs:
        raise PipelineError("load", "config needs either 'synthetic' or 'inputs'")
    for key in ("fixed_volume", "fixed_mask", "moving_volume", "moving_mask"):
        p = inputs.get(key)
        if p is None or not Path(p).exists():
            raise PipelineError("load", f"missing input path for {key!r}: {p}")
    fixed_volume = read_nrrd(inputs["fixed_volume"])
    fixed_mask = read_nrrd(inputs["fixed_mask"])
    moving_volume = read_nrrd(inputs["moving_volume"])
    moving_mask = read_nrrd(inputs["moving_mask"])
    fixed_cl = Centerline.from_json_dict(json.loads(Path(inputs["fixed_centerline"]).read_text())) if inputs.get("fixed_centerline") else None
    moving_cl = Centerline.from_json_dict(json.loads(Path(inputs["moving_centerline"]).read_text())) if inputs.get("moving_centerline") else None
    fixed_lm = LandmarkSet.from_json_dict(json.loads(Path(inputs["fixed_landmarks"]).read_text())) if inputs.get("fixed_landmarks") else LandmarkSet({}, "fixed")
    moving_lm = LandmarkSet.from_json_dict(json.loads(Path(inputs["moving_landmarks"]).read_text())) if inputs.get("moving_landmarks") else LandmarkSet({}, "moving")
    liver = read_nrrd(inputs["liver_mask"]) if inputs.get("liver_mask") else fixed_mask
    ws = OrientedBox.from_json_dict(json.loads(Path(inputs["workspace"]).read_text())) if inputs.get("workspace") else OrientedBox(
        np.asarray(fixed_volume.world_from_index(np.array(fixed_volume.dims) / 2.0)),
        np.eye(3),
        np.array(fixed_volume.dims) * fixed_volume.spacing * 0.4,
    )
    pair = MultimodalPair(
        fixed_volume=fixed_volume,
        fixed_mask=fixed_mask,
        fixed_centerline=fixed_cl,
        fixed_landmarks=fixed_lm,
        moving_volume=moving_volume,
        moving_mask=moving_mask,
        moving_centerline=moving_cl,
        moving_landmarks=moving_lm,
        ground_truth=None,
    )
    return Case(pair=pair, liver_mask=liver, workspace=ws, seed=int(config.get("seed", 0)))


def oracle_displacement(case: Case, t_rigid: RigidTransform3D, position: np.ndarray) -> np.ndarray:
    """Displacement a perfectly informed physician would apply at a control
    point: move it from the rigid-only location to the ground-truth one."""
    gt = case.pair.ground_truth
    if gt is None:
        raise PipelineError("nonrigid", "oracle edits require a synthetic ground truth")
    y = inverse(t_rigid).apply(position)
    from .synth import _apply_deformation

    target = _apply_deformation(gt, y[None, :])[0]
    return target - position


def run_pipeline(config: dict, output_dir) -> PipelineResult:
    """Execute the enabled stages; write transforms, the metrics CSV and
    fused PNG views into output_dir. Partial outputs are preserved on
    failure. success is True iff every enabled stage converged."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages_cfg = config.get("stages", {})
    do_rigid = stages_cfg.get("rigid", True)
    do_nonrigid = stages_cfg.get("nonrigid", True)
    do_s2v = stages_cfg.get("s2v", True)

    stages_run: List[str] = []
    errors: List[str] = []
    metrics: dict = {"case": config.get("name", "case")}
    outputs: dict = {}

    case = load_case(config)
    pair = case.pair

    t_rigid = RigidTransform3D.identity()
    warp: Optional[TpsWarp] = None
    cps: Optional[ControlPointSet] = None

    # stage a: rigid 3D US - CT/MRI
    if do_rigid:
        stages_run.append("rigid")
        try:
            source = extract_surface_points(pair.moving_mask, int(config.get("target_count", 3000)))
            target = extract_surface_points(pair.fixed_mask, int(config.get("target_count", 3000)))
            cfg = CpdConfig(outlier_weight=float(config.get("outlier_weight", 0.1)))
            t_rigid, diag = register_rigid_cpd(source, target, cfg)
            if not diag.converged:
                errors.append("[rigid] CPD did not converge")
            (out / "T_rigid.json").write_text(json.dumps(t_rigid.to_json_dict()))
            outputs["T_rigid"] = str(out / "T_rigid.json")
            if pair.moving_centerline and pair.fixed_centerline:
                mapped = Centerline(
                    tuple(t_rigid.apply(pl) for pl in pair.moving_centerline.polylines), frame="fixed"
                )
                mean, sd, _ = centerline_distance(mapped, pair.fixed_centerline)
                metrics["dcl_rigid_mean"] = mean
                metrics["dcl_rigid_sd"] = sd
        except Exception as e:
            errors.append(f"[rigid] {e}")

    # stage b: non-rigid TPS refinement
    if do_nonrigid and not any(s.startswith("[rigid]") for s in errors):
        stages_run.append("nonrigid")
        try:
            cps = generate_control_points(
                case.liver_mask, case.workspace, float(config.get("cp_spacing", 16.0))
            )
            edits = []
            if config.get("edits"):
                edits = json.loads(Path(config["edits"]).read_text())
            elif config.get("oracle_edits", True) and pair.ground_truth is not None:
                for p in cps.points:
                    if p.role == "movable":
                        disp = oracle_displacement(case, t_rigid, p.position)
                        edits.append({"point_id": p.id, "displacement": disp.tolist()})
            warp = warp_from_control_points(cps)
            for e in edits:
                cps, warp = drag_update(cps, int(e["point_id"]), np.asarray(e["displacement"], dtype=float))
            (out / "warp.json").write_text(json.dumps(warp.to_json_dict()))
            (out / "control_points.json").write_text(json.dumps(cps.to_json_dict()))
            outputs["warp"] = str(out / "warp.json")
            if pair.moving_centerline and pair.fixed_centerline:
                mapped = Centerline(
                    tuple(tps_apply(warp, t_rigid.apply(pl)) for pl in pair.moving_centerline.polylines),
                    frame="fixed",
                )
                mean, sd, _ = centerline_distance(mapped, pair.fixed_centerline)
                metrics["dcl_nonrigid_mean"] = mean
                metrics["dcl_nonrigid_sd"] = sd
                if metrics.get("dcl_rigid_mean"):
                    metrics["error_reduced_pct"] = 100.0 * (
                        1.0 - mean / metrics["dcl_rigid_mean"]
                    )
        except Exception as e:
            errors.append(f"[nonrigid] {e}")

    # stage c: rigid 2D-3D US + MPR views
    if do_s2v and not errors:
        stages_run.append("s2v")
        try:
            extent = pair.moving_volume.dims[0] * pair.moving_volume.spacing[0]
            base = _default_base_pose(pair.moving_volume)
            n_frames = int(config.get("n_frames", 5))
            frames, truths = synth_tracked_sequence(
                pair.moving_volume,
                seed=case.seed + 1,
                n_frames=n_frames,
                base_pose=base,
                drift_amplitude_mm=float(config.get("drift_mm", 6.0)),
                tracked_noise_translation_mm=float(config.get("tracked_noise_mm", 2.0)),
                tracked_noise_rotation_deg=float(config.get("tracked_noise_deg", 2.0)),
            )
            results = register_sequence(frames, pair.moving_volume, S2VOptions())
            poses_out = [
                {
                    "timestamp": f.timestamp,
                    "refined_pose": r.refined_pose.to_json_dict(),
                    "score": r.score,
                    "converged": r.converged,
                }
                for f, r in zip(frames, results)
            ]
            (out / "poses.json").write_text(json.dumps(poses_out))
            outputs["poses"] = str(out / "poses.json")
            if any(not r.converged and r.error for r in results):
                errors.append("[s2v] one or more frames failed")

            # TRE (2D-3D) and MPR landmark distance (end-to-end)
            if pair.moving_landmarks.landmarks and pair.ground_truth is not None:
                tre, ld = _sequence_landmark_errors(pair, truths, results, t_rigid, warp)
                metrics["tre_mean"] = tre
                metrics["ld_mean"] = ld

            view = mpr_chain(results[0], t_rigid, warp, pair.fixed_volume, us_image=frames[0].image)
            save_png(fused_view_to_rgba(view), out / "mpr_frame0.png")
            outputs["mpr_frame0"] = str(out / "mpr_frame0.png")
        except Exception as e:
            errors.append(f"[s2v] {e}")

    # fused orthogonal views of the current alignment
    if not errors and do_rigid:
        try:
            for name, pose in _orthogonal_poses(pair.fixed_volume).items():
                view = fused_mvr_view(
                    pair.fixed_volume,
                    _warped_overlay(pair.moving_volume, t_rigid, warp, pair.fixed_volume),
                    pose,
                    clip_depth=float(config.get("clip_depth", 30.0)),
                )
                save_png(fused_view_to_rgba(view), out / f"fused_{name}.png")
                outputs[f"fused_{name}"] = str(out / f"fused_{name}.png")
        except Exception as e:
            errors.append(f"[views] {e}")

    _write_metrics_csv(metrics, out / "metrics.csv")
    outputs["metrics"] = str(out / "metrics.csv")
    return PipelineResult(
        success=not errors,
        stages_run=stages_run,
        metrics=metrics,
        outputs=outputs,
        errors=errors,
    )


def _default_base_pose(volume: Volume, resolution: int = 64) -> SlicePose:
    nx, ny, nz = volume.dims
    extent_x = (nx - 1) * volume.spacing[0]
    extent_y = (ny - 1) * volume.spacing[1]
    center = volume.world_from_index(np.array([(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0]))
    # axial-ish plane through the middle, spanning 70% of the volume
    w, h = 0.7 * extent_x, 0.7 * extent_y
    origin2d = center - 0.5 * w * volume.direction[:, 0] - 0.5 * h * volume.direction[:, 1]
    tf = RigidTransform3D(volume.direction, origin2d)
    return SlicePose(tf, (w, h), (resolution, resolution))


def _orthogonal_poses(volume: Volume, resolution: int = 96) -> dict:
    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing
    c = volume.world_from_index(np.array([(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0]))
    d = volume.direction
    ex, ey, ez = d[:, 0], d[:, 1], d[:, 2]
    wx, wy, wz = (nx - 1) * sx, (ny - 1) * sy, (nz - 1) * sz
    poses = {}
    # axial: in-plane x,y; sagittal: y,z; coronal: x,z
    for name, (u, v, du, dv) in {
        "axial": (ex, ey, wx, wy),
        "sagittal": (ey, ez, wy, wz),
        "coronal": (ex, ez, wx, wz),
    }.items():
        n = np.cross(u, v)
        r = np.column_stack([u, v, n])
        origin2d = c - 0.5 * du * u - 0.5 * dv * v
        poses[name] = SlicePose(RigidTransform3D(r, origin2d), (du, dv), (resolution, resolution))
    return poses


def _warped_overlay(moving: Volume, t_rigid: RigidTransform3D, warp, reference: Volume) -> Volume:
    """Resample the moving US volume into the fixed frame through the
    current mapping (rigid + optional TPS), pull-back convention."""
    from .volume import sample_trilinear_many

    nx, ny, nz = reference.dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(float)
    world = reference.world_from_index(idx)
    # invert the forward mapping approximately: for rigid-only this is exact;
    # with a TPS the fixed-frame sample point is pulled back through the
    # rigid inverse of the warp's local displacement (first-order)
    if warp is not None:
        disp = tps_apply(warp, world) - world
        src_fixed = world - disp
    else:
        src_fixed = world
    src = inverse(t_rigid).apply(src_fixed)
    vals, _ = sample_trilinear_many(moving, src)
    return Volume(
        scalars=vals.reshape(nx, ny, nz).astype(np.float32),
        spacing=reference.spacing,
        origin=reference.origin,
        direction=reference.direction,
        modality="US3D",
    )


def _sequence_landmark_errors(pair: MultimodalPair, truths, results, t_rigid, warp):
    from .synth import _apply_deformation

    tre_all, ld_all = [], []
    gt = pair.ground_truth
    names = sorted(pair.moving_landmarks.landmarks)
    y = np.array([pair.moving_landmarks.landmarks[n] for n in names])
    y_fixed_true = _apply_deformation(gt, y)
    for true_pose, res in zip(truths, results):
        q_img = inverse(true_pose.transform).apply(y)
        y_hat = res.refined_pose.transform.apply(q_img)
        tre_all.append(np.linalg.norm(y_hat - y, axis=1))
        mapped = t_rigid.apply(y_hat)
        if warp is not None:
            mapped = tps_apply(warp, mapped)
        ld_all.append(np.linalg.norm(mapped - y_fixed_true, axis=1))
    return float(np.mean(tre_all)), float(np.mean(ld_all))


CSV_COLUMNS = [
    "case",
    "dcl_rigid_mean",
    "dcl_rigid_sd",
    "dcl_nonrigid_mean",
    "dcl_nonrigid_sd",
    "error_reduced_pct",
    "tre_mean",
    "ld_mean",
]


def _write_metrics_csv(metrics: dict, path: Path) -> None:
    header = ",".join(CSV_COLUMNS)
    row = ",".join(
        ("" if metrics.get(c) is None else (f"{metrics[c]:.6f}" if isinstance(metrics.get(c), float) else str(metrics[c])))
        for c in CSV_COLUMNS
    )
    path.write_text(header + "\n" + row + "\n")
