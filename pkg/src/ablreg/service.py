"""HTTP/JSON session service: registration state, fused slices, and
interactive drag edits, consumed by the browser UI.

Single-writer sessions: drags are serialized per session; slice reads are
concurrent against the last fitted warp snapshot. All errors are JSON
{code, message, stage}. No authentication: local single-operator tool.
"""

from __future__ import annotations

import io
import json
import threading
import uuid
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .geometry import RigidTransform3D
from .metrics import Centerline, centerline_distance, landmark_error
from .pipeline import _orthogonal_poses, _warped_overlay, build_synthetic_case, load_case
from .pointcloud import CpdConfig, extract_surface_points, register_rigid_cpd
from .tps import ControlPointSet, TpsWarp, drag_update, generate_control_points, tps_apply, warp_from_control_points
from .volume import SlicePose, Volume, fused_mvr_view, fused_view_to_rgba

DEFAULT_PORT = 8750


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, stage: str = ""):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.stage = stage


class SessionState:
    def __init__(self, case, config: dict):
        self.case = case
        self.config = config
        self.lock = threading.Lock()
        self.t_rigid: Optional[RigidTransform3D] = None
        self.rigid_diagnostics: Optional[dict] = None
        self.cps: Optional[ControlPointSet] = None
        self.warp: Optional[TpsWarp] = None
        self.audit_log: list = []  # drag events, also the undo stack
        self._overlay_cache = None  # (version, Volume)
        self.warp_version = 0

    def require_rigid(self):
        if self.t_rigid is None:
            raise ApiError(409, "stage-order", "rigid registration has not been run", "rigid")

    def current_metrics(self) -> dict:
        self.require_rigid()
        pair = self.case.pair
        out: dict = {"warp_version": self.warp_version, "edits": len(self.audit_log)}
        if pair.moving_centerline is not None and pair.fixed_centerline is not None:
            rigid_mapped = Centerline(
                tuple(self.t_rigid.apply(pl) for pl in pair.moving_centerline.polylines), frame="fixed"
            )
            mean_r, sd_r, _ = centerline_distance(rigid_mapped, pair.fixed_centerline)
            out["dcl_rigid_mean"] = mean_r
            out["dcl_rigid_sd"] = sd_r
            if self.warp is not None:
                cur = Centerline(
                    tuple(tps_apply(self.warp, pl) for pl in rigid_mapped.polylines), frame="fixed"
                )
                mean_c, sd_c, _ = centerline_distance(cur, pair.fixed_centerline)
            else:
                mean_c, sd_c = mean_r, sd_r
            out["dcl_current_mean"] = mean_c
            out["dcl_current_sd"] = sd_c
        if pair.moving_landmarks.landmarks and pair.fixed_landmarks.landmarks:
            def mapping(points):
                p = self.t_rigid.apply(points)
                return tps_apply(self.warp, p) if self.warp is not None else p

            mean_ld, sd_ld, _ = landmark_error(pair.moving_landmarks, pair.fixed_landmarks, mapping)
            out["ld_mean"] = mean_ld
            out["ld_sd"] = sd_ld
        return out

    def overlay_volume(self) -> Volume:
        if self._overlay_cache is not None and self._overlay_cache[0] == self.warp_version:
            return self._overlay_cache[1]
        vol = _warped_overlay(
            self.case.pair.moving_volume, self.t_rigid, self.warp, self.case.pair.fixed_volume
        )
        self._overlay_cache = (self.warp_version, vol)
        return vol

    def rebuild_from_log(self):
        """Replay the audit log on freshly generated control points."""
        cps = generate_control_points(
            self.case.liver_mask, self.case.workspace, float(self.config.get("cp_spacing", 16.0))
        )
        warp = warp_from_control_points(cps)
        for event in self.audit_log:
            cps, warp = drag_update(cps, event["point_id"], np.asarray(event["displacement"], dtype=float))
        self.cps, self.warp = cps, warp
        self.warp_version += 1


def create_app(data_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="ablreg session service")
    app.state.sessions = {}
    app.state.data_dir = Path(data_dir) if data_dir else Path.cwd()

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": exc.message, "stage": exc.stage},
        )

    def get_session(sid: str) -> SessionState:
        s = app.state.sessions.get(sid)
        if s is None:
            raise ApiError(404, "not-found", f"no session {sid}", "session")
        return s

    @app.post("/sessions")
    async def create_session(request: Request):
        config = await request.json()
        try:
            if "inputs" in config:
                resolved = dict(config)
                resolved["inputs"] = {
                    k: str(app.state.data_dir / v) if isinstance(v, str) else v
                    for k, v in config["inputs"].items()
                }
                case = load_case(resolved)
            else:
                case = load_case(config)
        except Exception as e:
            raise ApiError(400, "bad-input", str(e), "load")
        sid = uuid.uuid4().hex[:12]
        app.state.sessions[sid] = SessionState(case, config)
        return {"session_id": sid}

    @app.post("/sessions/{sid}/register/rigid")
    def register_rigid(sid: str):
        s = get_session(sid)
        with s.lock:
            pair = s.case.pair
            try:
                source = extract_surface_points(pair.moving_mask, int(s.config.get("target_count", 3000)))
                target = extract_surface_points(pair.fixed_mask, int(s.config.get("target_count", 3000)))
                t, diag = register_rigid_cpd(source, target, CpdConfig(
                    outlier_weight=float(s.config.get("outlier_weight", 0.1))
                ))
            except Exception as e:
                raise ApiError(500, "registration-failed", str(e), "rigid")
            s.t_rigid = t
            s.rigid_diagnostics = {
                "iterations": diag.iterations,
                "sigma2": diag.sigma2,
                "monotone": diag.monotone,
                "converged": diag.converged,
                "final_loglik": diag.loglik_trace[-1] if diag.loglik_trace else None,
            }
            s.rebuild_from_log()
        return {"t_rigid": t.to_json_dict(), "diagnostics": s.rigid_diagnostics}

    @app.get("/sessions/{sid}/info")
    def info(sid: str):
        s = get_session(sid)
        vol = s.case.pair.fixed_volume
        dims = vol.dims
        size = [(dims[i] - 1) * vol.spacing[i] for i in range(3)]
        center = vol.world_from_index((np.array(dims) - 1) / 2.0)
        return {
            "dims": list(dims),
            "spacing": vol.spacing.tolist(),
            "origin": vol.origin.tolist(),
            "size_mm": size,
            "center": center.tolist(),
            "rigid_done": s.t_rigid is not None,
        }

    @app.get("/sessions/{sid}/slice")
    def get_slice(
        sid: str,
        plane: str = "axial",
        pos: float = 0.0,
        clip: float = 30.0,
        blend: str = "alpha",
    ):
        s = get_session(sid)
        s.require_rigid()
        if plane not in ("axial", "sagittal", "coronal"):
            raise ApiError(422, "bad-plane", f"unknown plane {plane!r}", "slice")
        if blend not in ("alpha", "checkerboard"):
            raise ApiError(422, "bad-blend", f"unknown blend {blend!r}", "slice")
        fixed = s.case.pair.fixed_volume
        poses = _orthogonal_poses(fixed, resolution=int(s.config.get("slice_resolution", 128)))
        base_pose = poses[plane]
        normal = base_pose.normal
        tf = RigidTransform3D(base_pose.transform.rotation, base_pose.transform.translation + normal * pos)
        pose = SlicePose(tf, base_pose.extent, base_pose.resolution)
        overlay = s.overlay_volume()
        view = fused_mvr_view(fixed, overlay, pose, clip_depth=max(clip, 0.0), blend=blend,
                              window=(0.0, 1.0), opacity_thresh=float(s.config.get("opacity_thresh", 0.3)))
        rgba = fused_view_to_rgba(view)
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(rgba, mode="RGBA").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/sessions/{sid}/controlpoints")
    def get_controlpoints(sid: str):
        s = get_session(sid)
        s.require_rigid()
        return s.cps.to_json_dict()

    @app.post("/sessions/{sid}/controlpoints/{pid}/drag")
    async def drag(sid: str, pid: int, request: Request):
        s = get_session(sid)
        body = await request.json()
        disp = body.get("displacement")
        if disp is None or len(disp) != 3:
            raise ApiError(422, "bad-displacement", "displacement must be a 3-vector", "nonrigid")
        with s.lock:
            s.require_rigid()
            try:
                point = s.cps.get(pid)
            except KeyError as e:
                raise ApiError(404, "no-such-point", str(e), "nonrigid")
            if point.role == "anchor":
                raise ApiError(422, "anchor-immutable", f"control point {pid} is an anchor", "nonrigid")
            s.cps, s.warp = drag_update(s.cps, pid, np.asarray(disp, dtype=float))
            s.audit_log.append({"point_id": pid, "displacement": list(map(float, disp))})
            s.warp_version += 1
            return {"metrics": s.current_metrics()}

    @app.post("/sessions/{sid}/undo")
    def undo(sid: str):
        s = get_session(sid)
        with s.lock:
            s.require_rigid()
            if not s.audit_log:
                raise ApiError(409, "nothing-to-undo", "audit log is empty", "nonrigid")
            s.audit_log.pop()
            s.rebuild_from_log()
            return {"metrics": s.current_metrics()}

    @app.get("/sessions/{sid}/metrics")
    def metrics(sid: str):
        s = get_session(sid)
        return s.current_metrics()

    @app.get("/sessions/{sid}/audit")
    def audit(sid: str):
        s = get_session(sid)
        return {"events": list(s.audit_log)}

    return app


def serve(data_dir: Optional[str] = None, port: Optional[int] = None):
    import os

    import uvicorn

    port = port or int(os.environ.get("ABLREG_PORT", DEFAULT_PORT))
    uvicorn.run(create_app(data_dir), host="127.0.0.1", port=port)
