"""Denavit-Hartenberg forward kinematics and arm parameter calibration.

Standard (distal) DH convention: the link transform for joint i is
    Rz(theta_i) @ Tz(d_i) @ Tx(a_i) @ Rx(alpha_i)
with theta_i = theta_offset_i + encoder for revolute joints and
d_i = d_i + encoder for prismatic joints. Conventions differ between
authors; this package uses distal DH everywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .geometry import RigidTransform3D, compose, matrix_to_rotvec
from .lm import LMOptions, lm_minimize

REVOLUTE = "revolute"
PRISMATIC = "prismatic"

PARAM_NAMES = ("theta_offset", "d", "a", "alpha")


@dataclass(frozen=True)
class DhChain:
    """One entry per joint; angles in degrees, lengths in mm."""

    theta_offset: np.ndarray
    d: np.ndarray
    a: np.ndarray
    alpha: np.ndarray
    joint_kinds: tuple

    def __post_init__(self):
        arrays = {}
        n = len(self.joint_kinds)
        if n < 1:
            raise ValueError("chain needs at least one joint")
        for name in PARAM_NAMES:
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (n,):
                raise ValueError(f"{name} length {v.shape} != joint count {n}")
            arrays[name] = v
        for k in self.joint_kinds:
            if k not in (REVOLUTE, PRISMATIC):
                raise ValueError(f"unknown joint kind {k!r}")
        for name in ("alpha", "theta_offset"):
            v = arrays[name]
            if np.any(v <= -180.0) or np.any(v > 180.0):
                raise ValueError(f"{name} must lie in (-180, 180]")
        for name, v in arrays.items():
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        object.__setattr__(self, "joint_kinds", tuple(self.joint_kinds))

    @property
    def n_joints(self) -> int:
        return len(self.joint_kinds)

    def to_json_dict(self) -> dict:
        return {
            "theta_offset": self.theta_offset.tolist(),
            "d": self.d.tolist(),
            "a": self.a.tolist(),
            "alpha": self.alpha.tolist(),
            "joint_kinds": list(self.joint_kinds),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "DhChain":
        return DhChain(
            np.asarray(d["theta_offset"], dtype=float),
            np.asarray(d["d"], dtype=float),
            np.asarray(d["a"], dtype=float),
            np.asarray(d["alpha"], dtype=float),
            tuple(d["joint_kinds"]),
        )

    def params_vector(self) -> np.ndarray:
        """Flat parameter vector [theta_offset | d | a | alpha], length 4n."""
        return np.concatenate([self.theta_offset, self.d, self.a, self.alpha])

    def with_params_vector(self, p: np.ndarray) -> "DhChain":
        n = self.n_joints
        p = np.asarray(p, dtype=float)
        if p.shape != (4 * n,):
            raise ValueError(f"expected {4 * n} parameters, got {p.shape}")
        # wrap angles back into (-180, 180] so the result is a valid chain
        theta = (p[:n] + 180.0) % 360.0 - 180.0
        theta = np.where(theta == -180.0, 180.0, theta)
        alpha = (p[3 * n :] + 180.0) % 360.0 - 180.0
        alpha = np.where(alpha == -180.0, 180.0, alpha)
        return DhChain(theta, p[n : 2 * n], p[2 * n : 3 * n], alpha, self.joint_kinds)


@dataclass(frozen=True)
class JointReading:
    """Encoder values: degrees for revolute joints, mm for prismatic."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def _dh_link(theta_deg, d, a, alpha_deg):
    th = np.radians(theta_deg)
    al = np.radians(alpha_deg)
    ct, st = np.cos(th), np.sin(th)
    ca, sa = np.cos(al), np.sin(al)
    return np.array(
        [
            [ct, -st * ca, st * sa, a * ct],
            [st, ct * ca, -ct * sa, a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def dh_forward(chain: DhChain, reading: JointReading) -> RigidTransform3D:
    """End-effector pose in the arm base frame F_1."""
    enc = reading.values
    if enc.shape != (chain.n_joints,):
        raise ValueError(
            f"reading length {enc.shape[0] if enc.ndim == 1 else enc.shape} "
            f"does not match chain joint count {chain.n_joints}"
        )
    m = np.eye(4)
    for i, kind in enumerate(chain.joint_kinds):
        theta = chain.theta_offset[i] + (enc[i] if kind == REVOLUTE else 0.0)
        d = chain.d[i] + (enc[i] if kind == PRISMATIC else 0.0)
        m = m @ _dh_link(theta, d, chain.a[i], chain.alpha[i])
    return RigidTransform3D.from_matrix(m)


class UnidentifiableParameterWarning(UserWarning):
    pass


class CalibrationError(RuntimeError):
    pass


def _pose_residual(est: RigidTransform3D, meas: RigidTransform3D, rotation_weight: float):
    dt = est.translation - meas.translation
    rv = matrix_to_rotvec(est.rotation @ meas.rotation.T)  # degrees
    return np.concatenate([dt, rotation_weight * rv])


def calibrate_arm(
    chain_init: DhChain,
    observations: Sequence[tuple],
    rotation_weight: float = 1.0,
    max_iterations: int = 200,
    cost_change_tol: float = 1e-10,
) -> DhChain:
    """Fit DH parameters to (JointReading, measured end pose) observations.

    Residual per observation: 3 translation components (mm) and 3
    rotation-vector components (deg), the latter scaled by rotation_weight
    (default 1 deg equivalent to 1 mm). Raises CalibrationError on
    non-convergence; warns when the Jacobian at the optimum is rank
    deficient, listing the null-space directions.
    """
    n = chain_init.n_joints
    min_obs = int(np.ceil(4 * n / 6)) + 2
    if len(observations) < min_obs:
        raise ValueError(f"need at least {min_obs} observations for {n} joints, got {len(observations)}")
    readings = [obs[0] for obs in observations]
    measured = [obs[1] for obs in observations]

    def residuals(p):
        chain = chain_init.with_params_vector(p)
        out = np.empty(6 * len(readings))
        for i, (rd, ms) in enumerate(zip(readings, measured)):
            out[6 * i : 6 * i + 6] = _pose_residual(dh_forward(chain, rd), ms, rotation_weight)
        return out

    opts = LMOptions(max_iterations=max_iterations)
    result = lm_minimize(residuals, chain_init.params_vector(), options=opts)

    # relative cost-change convergence: LM's own criteria are stricter, so a
    # converged LM result always satisfies the contract; check the residual
    # explicitly for the not-converged case.
    if not result.converged:
        r_final = residuals(result.x)
        rel = np.linalg.norm(r_final)
        raise CalibrationError(f"arm calibration did not converge; final cost {result.cost:.3e} (|r|={rel:.3e})")

    jac = _numeric_jacobian(residuals, result.x)
    _, sv, vt = np.linalg.svd(jac, full_matrices=False)
    tol = max(jac.shape) * np.finfo(float).eps * (sv[0] if sv.size else 1.0)
    null_dirs = [vt[i] for i in range(len(sv)) if sv[i] < max(tol, 1e-8 * sv[0])]
    if null_dirs:
        labels = []
        for v in null_dirs:
            terms = [
                f"{v[j]:+.3f}*{PARAM_NAMES[j // n]}[{j % n}]"
                for j in np.argsort(-np.abs(v))[:3]
                if abs(v[j]) > 0.05
            ]
            labels.append(" ".join(terms))
        warnings.warn(
            "arm calibration Jacobian is rank-deficient; unidentifiable directions: " + "; ".join(labels),
            UnidentifiableParameterWarning,
        )

    return chain_init.with_params_vector(result.x)


def _numeric_jacobian(fn, x, step=1e-7):
    from .lm import forward_difference_jacobian

    return forward_difference_jacobian(fn, x, step=step)


def tracked_image_pose(
    chain: DhChain, reading: JointReading, probe_cal: RigidTransform3D
) -> RigidTransform3D:
    """Pose of the 2D US image frame F_2dUS in the arm base frame F_1."""
    return compose(dh_forward(chain, reading), probe_cal)
