"""Calibration session files: loading, arm/probe calibration from a
session, and the tracking-accuracy verification report.

Session schema (JSON, units mm/deg): "chain_init" (or "chain"), "readings",
"measured_poses" (4x4 row-major), "zbar_fiducials", "probe_stations" (joint
reading, tracked end pose and Z-bar observations per station), optional
"probe_nominal" and "truth".
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .geometry import RigidTransform3D, compose, inverse, nearest_rotation, pose_error
from .handeye import HandEyeProblem, HandEyeResult, calibrate_probe
from .kinematics import DhChain, JointReading, calibrate_arm, dh_forward, tracked_image_pose
from .zbar import ZBarFiducial, ZBarObservation, zbar_locate


def load_session(path) -> dict:
    return json.loads(Path(path).read_text())


def save_session(session: dict, path) -> None:
    Path(path).write_text(json.dumps(session, indent=1))


def session_fiducials(session: dict) -> dict:
    return {
        f["id"]: ZBarFiducial(
            f["id"],
            np.asarray(f["A"], dtype=float),
            np.asarray(f["B"], dtype=float),
            np.asarray(f["C"], dtype=float),
            np.asarray(f["D"], dtype=float),
        )
        for f in session["zbar_fiducials"]
    }


def arm_observations(session: dict) -> List[tuple]:
    readings = [JointReading(np.asarray(r, dtype=float)) for r in session["readings"]]
    poses = [RigidTransform3D.from_matrix(m) for m in session["measured_poses"]]
    return list(zip(readings, poses))


def calibrate_arm_from_session(session: dict, chain_init: Optional[DhChain] = None) -> DhChain:
    if chain_init is None:
        key = "chain_init" if "chain_init" in session else "chain"
        chain_init = DhChain.from_json_dict(session[key])
    return calibrate_arm(chain_init, arm_observations(session))


def plane_pose_from_zbar(
    fiducials: dict, observations: List[ZBarObservation]
) -> RigidTransform3D:
    """Absolute-orientation fit of the image plane pose in F_vol.

    Each observation contributes one 2D-3D correspondence: the diagonal
    intersection p2 (lifted to (u, v, 0) in image coords) paired with its
    zbar_locate 3D position. Kabsch with a reflection guard; needs at
    least 3 non-collinear correspondences.
    """
    if len(observations) < 3:
        raise ValueError("need at least 3 Z-bar observations to fit a plane pose")
    src = np.array([[o.p2[0], o.p2[1], 0.0] for o in observations])
    dst = np.array([zbar_locate(fiducials[o.fiducial_id], o) for o in observations])
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-6 * max(s[0], 1.0):
        raise ValueError("Z-bar intersection points are collinear; plane pose under-determined")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    r = nearest_rotation(r)
    return RigidTransform3D(r, mu_d - r @ mu_s)


def probe_station_poses(
    session: dict,
    chain: Optional[DhChain] = None,
    station_indices: Optional[List[int]] = None,
) -> Tuple[List[RigidTransform3D], List[RigidTransform3D]]:
    """(end poses E_i in F_1, content poses C_i = phantom pose in F_2dUS).

    With a chain, E_i comes from the station joint reading through the
    forward kinematics; otherwise the recorded (tracker-measured) end pose
    is used as-is.
    """
    fids = session_fiducials(session)
    ends, contents = [], []
    all_stations = session["probe_stations"]
    if station_indices is None:
        picked = all_stations
    else:
        picked = [all_stations[i] for i in station_indices]
    for st in picked:
        obs = [
            ZBarObservation(
                o["fiducial_id"],
                np.asarray(o["p1"], dtype=float),
                np.asarray(o["p2"], dtype=float),
                np.asarray(o["p3"], dtype=float),
            )
            for o in st["observations"]
        ]
        plane = plane_pose_from_zbar(fids, obs)  # image frame in F_vol
        if chain is not None and "reading" in st:
            end = dh_forward(chain, JointReading(np.asarray(st["reading"], dtype=float)))
        else:
            end = RigidTransform3D.from_matrix(st["end_pose"])
        ends.append(end)
        contents.append(inverse(plane))
    return ends, contents


def calibrate_probe_from_session(
    session: dict,
    chain: Optional[DhChain] = None,
    station_indices: Optional[List[int]] = None,
) -> HandEyeResult:
    ends, contents = probe_station_poses(session, chain, station_indices)
    problem = HandEyeProblem.from_absolute_poses(ends, contents)
    return calibrate_probe(problem)


@dataclass
class VerifyRow:
    station: int
    tx: float
    ty: float
    tz: float
    ed: float
    rx: float
    ry: float
    rz: float
    ga: float


def verify_session(
    session: dict,
    chain: DhChain,
    probe_cal: RigidTransform3D,
    station_indices: Optional[List[int]] = None,
) -> List[VerifyRow]:
    """Tracking-accuracy table: per probe station, the pose error between
    the calibrated tracked image plane (E_i composed with the hand-eye
    result, expressed in F_vol) and the Z-bar-derived ground-truth plane.

    The phantom pose W (F_vol in F_1) is taken from the session truth when
    present, otherwise estimated from the first station.
    """
    ends, contents = probe_station_poses(session, chain, station_indices)
    planes = [inverse(c) for c in contents]  # ground truth image poses in F_vol
    if "truth" in session and "phantom_pose" in session["truth"]:
        w = RigidTransform3D.from_matrix(session["truth"]["phantom_pose"])
    else:
        w = compose(compose(ends[0], probe_cal), inverse(planes[0]))
    rows = []
    for i, (e, plane_gt) in enumerate(zip(ends, planes)):
        tracked_in_vol = compose(inverse(w), compose(e, probe_cal))
        err = pose_error(tracked_in_vol, plane_gt)
        rows.append(
            VerifyRow(
                station=i if station_indices is None else station_indices[i],
                tx=err.tx, ty=err.ty, tz=err.tz, ed=err.euclidean_distance,
                rx=err.rx, ry=err.ry, rz=err.rz, ga=err.geodesic_angle,
            )
        )
    return rows


def verify_rows_to_csv(rows: List[VerifyRow]) -> str:
    lines = ["station,Tx,Ty,Tz,ED,Rx,Ry,Rz,GA"]
    for r in rows:
        lines.append(
            f"{r.station},{r.tx:.6f},{r.ty:.6f},{r.tz:.6f},{r.ed:.6f},"
            f"{r.rx:.6f},{r.ry:.6f},{r.rz:.6f},{r.ga:.6f}"
        )
    return "\n".join(lines) + "\n"
