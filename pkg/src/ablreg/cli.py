"""Command-line interface: calibration, registration, synthetic data,
metrics, the end-to-end pipeline, and the session service."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np


@click.group()
def main():
    """2D US - CT/MRI registration toolkit."""


# --------------------------------------------------------------- calibrate


@main.group()
def calibrate():
    """Arm and probe calibration from a session file."""


@calibrate.command("arm")
@click.argument("session_file", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Write the calibrated chain JSON here.")
def calibrate_arm_cmd(session_file, out):
    from .calibsession import calibrate_arm_from_session, load_session

    session = load_session(session_file)
    chain = calibrate_arm_from_session(session)
    payload = json.dumps(chain.to_json_dict(), indent=1)
    if out:
        Path(out).write_text(payload)
    click.echo(payload)


@calibrate.command("probe")
@click.argument("session_file", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
def calibrate_probe_cmd(session_file, out):
    from .calibsession import (
        calibrate_arm_from_session,
        calibrate_probe_from_session,
        load_session,
    )

    session = load_session(session_file)
    chain = calibrate_arm_from_session(session)
    result = calibrate_probe_from_session(session, chain)
    payload = json.dumps(
        {
            "probe_cal": result.x.to_json_dict(),
            "max_residual_ed_mm": result.max_residual_ed_mm,
            "max_residual_ga_deg": result.max_residual_ga_deg,
        },
        indent=1,
    )
    if out:
        Path(out).write_text(payload)
    click.echo(payload)


@calibrate.command("verify")
@click.argument("session_file", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="CSV output path (stdout otherwise).")
def calibrate_verify_cmd(session_file, out):
    from .calibsession import (
        calibrate_arm_from_session,
        calibrate_probe_from_session,
        load_session,
        verify_rows_to_csv,
        verify_session,
    )

    session = load_session(session_file)
    chain = calibrate_arm_from_session(session)
    probe = calibrate_probe_from_session(session, chain)
    rows = verify_session(session, chain, probe.x)
    csv = verify_rows_to_csv(rows)
    if out:
        Path(out).write_text(csv)
    click.echo(csv, nl=False)


# ---------------------------------------------------------------- register


@main.group()
def register():
    """Registration stages."""


@register.command("rigid")
@click.option("--source", required=True, type=click.Path(exists=True), help="Moving vessel mask (NRRD).")
@click.option("--target", required=True, type=click.Path(exists=True), help="Fixed vessel mask (NRRD).")
@click.option("--out", required=True, type=click.Path())
@click.option("--outlier-weight", default=0.1, show_default=True)
@click.option("--target-count", default=3000, show_default=True)
def register_rigid_cmd(source, target, out, outlier_weight, target_count):
    from .nrrd_io import read_nrrd
    from .pointcloud import CpdConfig, extract_surface_points, register_rigid_cpd

    src = extract_surface_points(read_nrrd(source), target_count)
    tgt = extract_surface_points(read_nrrd(target), target_count)
    t, diag = register_rigid_cpd(src, tgt, CpdConfig(outlier_weight=outlier_weight, max_points=target_count))
    Path(out).write_text(json.dumps(t.to_json_dict()))
    click.echo(
        f"rigid: {diag.iterations} iterations, sigma2={diag.sigma2:.4g}, "
        f"monotone={diag.monotone}, converged={diag.converged}"
    )


@register.command("nonrigid")
@click.option("--rigid", "rigid_file", required=True, type=click.Path(exists=True))
@click.option("--liver", required=True, type=click.Path(exists=True), help="Liver mask (NRRD).")
@click.option("--workspace", required=True, type=click.Path(exists=True), help="Oriented box JSON.")
@click.option("--edits", type=click.Path(exists=True), default=None, help="JSON list of drag edits.")
@click.option("--spacing", default=16.0, show_default=True, help="Control point spacing (mm).")
@click.option("--out", required=True, type=click.Path(), help="Warp JSON output.")
def register_nonrigid_cmd(rigid_file, liver, workspace, edits, spacing, out):
    from .nrrd_io import read_nrrd
    from .tps import OrientedBox, drag_update, generate_control_points, warp_from_control_points

    box = OrientedBox.from_json_dict(json.loads(Path(workspace).read_text()))
    cps = generate_control_points(read_nrrd(liver), box, spacing)
    warp = warp_from_control_points(cps)
    if edits:
        for e in json.loads(Path(edits).read_text()):
            cps, warp = drag_update(cps, int(e["point_id"]), np.asarray(e["displacement"], dtype=float))
    Path(out).write_text(json.dumps(warp.to_json_dict()))
    n_anchor = sum(1 for p in cps.points if p.role == "anchor")
    click.echo(f"nonrigid: {len(cps)} control points ({n_anchor} anchors), warp written to {out}")


@register.command("s2v")
@click.option("--frames", "frames_dir", required=True, type=click.Path(exists=True))
@click.option("--volume", "volume_file", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--no-warm-start", is_flag=True, default=False)
def register_s2v_cmd(frames_dir, volume_file, out, no_warm_start):
    from .frameio import load_frame_sequence
    from .nrrd_io import read_nrrd
    from .slice2volume import S2VOptions, register_sequence

    frames = load_frame_sequence(frames_dir)
    volume = read_nrrd(volume_file)
    results = register_sequence(frames, volume, S2VOptions(warm_start=not no_warm_start))
    payload = [
        {
            "timestamp": f.timestamp,
            "refined_pose": r.refined_pose.to_json_dict(),
            "score": r.score,
            "converged": r.converged,
            "error": r.error,
        }
        for f, r in zip(frames, results)
    ]
    Path(out).write_text(json.dumps(payload, indent=1))
    ok = sum(1 for r in results if r.converged)
    click.echo(f"s2v: {ok}/{len(results)} frames converged, poses written to {out}")


# ------------------------------------------------------------------- synth


@main.group()
def synth():
    """Synthetic scenes (NRRD + JSON bundles)."""


@synth.command("vessel-tree")
@click.option("--seed", default=0, show_default=True)
@click.option("--branches", default=4, show_default=True)
@click.option("--extent", default=100.0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def synth_vessel_tree_cmd(seed, branches, extent, out):
    from .nrrd_io import write_nrrd
    from .synth import synth_vessel_tree

    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    tree = synth_vessel_tree(seed, branches, extent)
    write_nrrd(tree.mask, d / "mask.nrrd")
    (d / "centerline.json").write_text(json.dumps(tree.centerline.to_json_dict()))
    (d / "landmarks.json").write_text(json.dumps(tree.landmarks.to_json_dict()))
    click.echo(f"vessel tree written to {d}")


@synth.command("pair")
@click.option("--seed", default=0, show_default=True)
@click.option("--rigid-deg", default=10.0, show_default=True)
@click.option("--rigid-mm", default=15.0, show_default=True)
@click.option("--deform-mm", default=6.0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def synth_pair_cmd(seed, rigid_deg, rigid_mm, deform_mm, out):
    from .nrrd_io import write_nrrd
    from .synth import synth_multimodal_pair, synth_smooth_deformation

    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    deformation, _, _ = synth_smooth_deformation(
        seed, magnitude_mm=deform_mm, rigid_rotation_deg=rigid_deg, rigid_translation_mm=rigid_mm
    )
    pair = synth_multimodal_pair(seed, deformation)
    write_nrrd(pair.fixed_volume, d / "fixed.nrrd")
    write_nrrd(pair.fixed_mask, d / "fixed_mask.nrrd")
    write_nrrd(pair.moving_volume, d / "moving.nrrd")
    write_nrrd(pair.moving_mask, d / "moving_mask.nrrd")
    (d / "fixed_centerline.json").write_text(json.dumps(pair.fixed_centerline.to_json_dict()))
    (d / "moving_centerline.json").write_text(json.dumps(pair.moving_centerline.to_json_dict()))
    (d / "fixed_landmarks.json").write_text(json.dumps(pair.fixed_landmarks.to_json_dict()))
    (d / "moving_landmarks.json").write_text(json.dumps(pair.moving_landmarks.to_json_dict()))
    click.echo(f"multimodal pair written to {d}")


@synth.command("zbar-session")
@click.option("--seed", default=0, show_default=True)
@click.option("--poses", default=25, show_default=True)
@click.option("--noise-mm", default=0.0, show_default=True)
@click.option("--noise-deg", default=0.0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def synth_zbar_cmd(seed, poses, noise_mm, noise_deg, out):
    from .calibsession import save_session
    from .synth import synth_zbar_session

    session = synth_zbar_session(
        seed, n_poses=poses, noise_translation_mm=noise_mm, noise_rotation_deg=noise_deg
    )
    save_session(session, out)
    click.echo(f"calibration session written to {out}")


# ----------------------------------------------------------------- metrics


@main.command("metrics")
@click.option("--fixed-centerline", required=True, type=click.Path(exists=True))
@click.option("--moving-centerline", required=True, type=click.Path(exists=True))
@click.option("--rigid", "rigid_file", type=click.Path(exists=True), default=None)
@click.option("--warp", "warp_file", type=click.Path(exists=True), default=None)
@click.option("--case", "case_name", default="case", show_default=True)
@click.option("--out", type=click.Path(), default=None, help="CSV output (stdout otherwise).")
def metrics_cmd(fixed_centerline, moving_centerline, rigid_file, warp_file, case_name, out):
    """D_cl before/after the current mapping, as a Table-2-style CSV row."""
    from .geometry import RigidTransform3D
    from .metrics import Centerline, centerline_distance
    from .pipeline import CSV_COLUMNS
    from .tps import TpsWarp, tps_apply

    fixed = Centerline.from_json_dict(json.loads(Path(fixed_centerline).read_text()))
    moving = Centerline.from_json_dict(json.loads(Path(moving_centerline).read_text()))
    moving = Centerline(moving.polylines, frame=fixed.frame)
    t = RigidTransform3D.from_json_dict(json.loads(Path(rigid_file).read_text())) if rigid_file else RigidTransform3D.identity()
    warp = TpsWarp.from_json_dict(json.loads(Path(warp_file).read_text())) if warp_file else None

    rigid_mapped = Centerline(tuple(t.apply(pl) for pl in moving.polylines), frame=fixed.frame)
    mean_r, sd_r, _ = centerline_distance(rigid_mapped, fixed)
    values = {"case": case_name, "dcl_rigid_mean": mean_r, "dcl_rigid_sd": sd_r}
    if warp is not None:
        cur = Centerline(tuple(tps_apply(warp, pl) for pl in rigid_mapped.polylines), frame=fixed.frame)
        mean_n, sd_n, _ = centerline_distance(cur, fixed)
        values.update(
            dcl_nonrigid_mean=mean_n,
            dcl_nonrigid_sd=sd_n,
            error_reduced_pct=100.0 * (1.0 - mean_n / mean_r) if mean_r > 0 else 0.0,
        )
    header = ",".join(CSV_COLUMNS)
    row = ",".join("" if values.get(c) is None else (f"{values[c]:.6f}" if isinstance(values.get(c), float) else str(values[c])) for c in CSV_COLUMNS)
    text = header + "\n" + row + "\n"
    if out:
        Path(out).write_text(text)
    click.echo(text, nl=False)


# ---------------------------------------------------------------- pipeline


@main.command("pipeline")
@click.argument("config_file", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def pipeline_cmd(config_file, out):
    """Run the end-to-end pipeline from a JSON config."""
    from .pipeline import run_pipeline

    config = json.loads(Path(config_file).read_text())
    result = run_pipeline(config, out)
    click.echo(json.dumps({"success": result.success, "stages": result.stages_run,
                           "metrics": result.metrics, "errors": result.errors}, indent=1))
    if not result.success:
        sys.exit(1)


# ------------------------------------------------------------------- serve


@main.command("serve")
@click.option("--data-dir", type=click.Path(exists=True), default=".", show_default=True)
@click.option("--port", type=int, default=None, help="Defaults to $ABLREG_PORT or 8750.")
def serve_cmd(data_dir, port):
    """Start the HTTP/JSON session service."""
    from .service import serve

    serve(data_dir, port)


if __name__ == "__main__":
    main()
