"""Hand-eye calibration: solve A_i X = X B_i (Tsai-Lenz two-step method).

A_i are relative motions of the probe end F_end, B_i the corresponding
relative motions of the content observed in the image frame F_2dUS; X is
the fixed F_end -> F_2dUS transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .geometry import (
    RigidTransform3D,
    compose,
    inverse,
    matrix_to_rotvec,
    pose_error,
)

MIN_AXIS_ANGLE_DEG = 5.0


class DegenerateMotionError(ValueError):
    pass


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0.0]])


def _rotation_axis(r: np.ndarray) -> Optional[np.ndarray]:
    v = matrix_to_rotvec(r)
    n = np.linalg.norm(v)
    if n < 1e-6:
        return None
    return v / n


@dataclass(frozen=True)
class HandEyeProblem:
    """Paired relative motions (A_i, B_i)."""

    motions_a: tuple
    motions_b: tuple

    def __post_init__(self):
        a, b = tuple(self.motions_a), tuple(self.motions_b)
        if len(a) != len(b):
            raise ValueError("motion lists must have equal length")
        if len(a) < 2:
            raise ValueError("hand-eye calibration needs at least 2 motion pairs")
        axes = [ax for ax in (_rotation_axis(m.rotation) for m in a) if ax is not None]
        ok = False
        for i in range(len(axes)):
            for j in range(i + 1, len(axes)):
                ang = np.degrees(np.arccos(np.clip(abs(np.dot(axes[i], axes[j])), -1.0, 1.0)))
                if ang > MIN_AXIS_ANGLE_DEG:
                    ok = True
        if not ok:
            raise DegenerateMotionError(
                "all A_i rotation axes (near-)parallel; hand-eye rotation is unobservable"
            )
        object.__setattr__(self, "motions_a", a)
        object.__setattr__(self, "motions_b", b)

    @staticmethod
    def from_absolute_poses(
        end_poses: Sequence[RigidTransform3D], content_poses: Sequence[RigidTransform3D]
    ) -> "HandEyeProblem":
        """Build relative-motion pairs from absolute pose lists.

        end_poses: F_end in F_1 per station; content_poses: observed content
        (phantom) pose in F_2dUS per station. Uses consecutive stations,
        pairing A_ij = E_j^-1 E_i with B_ij = C_j C_i^-1 so that A X = X B.
        """
        if len(end_poses) != len(content_poses):
            raise ValueError("pose lists must have equal length")
        a, b = [], []
        for i in range(len(end_poses) - 1):
            a.append(compose(inverse(end_poses[i + 1]), end_poses[i]))
            b.append(compose(content_poses[i + 1], inverse(content_poses[i])))
        return HandEyeProblem(tuple(a), tuple(b))


@dataclass
class HandEyeResult:
    x: RigidTransform3D
    max_residual_ed_mm: float
    max_residual_ga_deg: float


def calibrate_probe(problem: HandEyeProblem) -> HandEyeResult:
    """Tsai-Lenz separable solution of A_i X = X B_i in least squares.

    Rotation from a linear system over modified Rodrigues vectors, then
    translation from the stacked linear system (R_A - I) t = R_X t_B - t_A.
    """
    pairs = list(zip(problem.motions_a, problem.motions_b))

    # step 1: rotation
    rows, rhs = [], []
    for a, b in pairs:
        pa = _rodrigues_modified(a.rotation)
        pb = _rodrigues_modified(b.rotation)
        rows.append(_skew(pa + pb))
        rhs.append(pb - pa)
    m = np.vstack(rows)
    y = np.concatenate(rhs)
    p_prime, *_ = np.linalg.lstsq(m, y, rcond=None)
    p = 2.0 * p_prime / np.sqrt(1.0 + float(p_prime @ p_prime))
    n2 = float(p @ p)
    r_x = (1.0 - n2 / 2.0) * np.eye(3) + 0.5 * (
        np.outer(p, p) + np.sqrt(max(4.0 - n2, 0.0)) * _skew(p)
    )

    # step 2: translation
    rows, rhs = [], []
    for a, b in pairs:
        rows.append(a.rotation - np.eye(3))
        rhs.append(r_x @ b.translation - a.translation)
    t_x, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)

    from .geometry import nearest_rotation

    x = RigidTransform3D(nearest_rotation(r_x), t_x)

    ed, ga = 0.0, 0.0
    for a, b in pairs:
        err = pose_error(compose(a, x), compose(x, b))
        ed = max(ed, err.euclidean_distance)
        ga = max(ga, err.geodesic_angle)
    return HandEyeResult(x=x, max_residual_ed_mm=ed, max_residual_ga_deg=ga)


def _rodrigues_modified(r: np.ndarray) -> np.ndarray:
    """Tsai's modified Rodrigues vector 2 sin(theta/2) * axis."""
    v_deg = matrix_to_rotvec(r)
    theta = np.radians(np.linalg.norm(v_deg))
    if theta < 1e-12:
        return np.zeros(3)
    axis = np.radians(v_deg) / theta
    return 2.0 * np.sin(theta / 2.0) * axis
