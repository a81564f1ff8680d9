"""Rigid 3D transforms, frames, and pose error metrics.

Conventions used throughout the package:
- rotations are stored as 3x3 matrices; quaternions appear only transiently
  (random generation, hand-eye internals),
- translations are millimetres,
- angles are degrees at every public interface, radians internally,
- per-axis rotational errors use the fixed-axis (extrinsic) XYZ Euler
  convention, i.e. R = Rz(rz) @ Ry(ry) @ Rx(rx).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


def _as_array(x, shape):
    a = np.asarray(x, dtype=float)
    if a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    return a


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (closest proper rotation, Frobenius)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        r = u @ vt
    return r


@dataclass(frozen=True)
class RigidTransform3D:
    """SE(3) pose: x_world = rotation @ x_local + translation (mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _as_array(self.rotation, (3, 3))
        t = _as_array(self.translation, (3,))
        if np.linalg.norm(r.T @ r - np.eye(3)) >= ORTHO_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) >= ORTHO_TOL:
            raise ValueError("rotation determinant is not +1 (reflection?)")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform3D":
        return RigidTransform3D(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "RigidTransform3D":
        m = _as_array(m, (4, 4))
        r = nearest_rotation(m[:3, :3])
        return RigidTransform3D(r, m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (3,) or (N,3) through the transform."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def to_json_dict(self) -> dict:
        """Row-major 4x4 under key "matrix"; units mm / degrees."""
        return {"matrix": self.matrix().tolist()}

    @staticmethod
    def from_json_dict(d) -> "RigidTransform3D":
        return RigidTransform3D.from_matrix(d["matrix"])


def compose(a: RigidTransform3D, b: RigidTransform3D) -> RigidTransform3D:
    """Transform mapping x -> a(b(x))."""
    r = a.rotation @ b.rotation
    drift = np.linalg.norm(r.T @ r - np.eye(3))
    if drift > 1e-12:
        r = nearest_rotation(r)
    return RigidTransform3D(r, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform3D) -> RigidTransform3D:
    r = t.rotation.T
    return RigidTransform3D(r, -r @ t.translation)


def rot_x(angle_deg: float) -> np.ndarray:
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(angle_deg: float) -> np.ndarray:
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rot_z(angle_deg: float) -> np.ndarray:
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def rotvec_to_matrix(v_deg: np.ndarray) -> np.ndarray:
    """Rotation matrix from an axis-angle vector whose norm is in degrees."""
    v = np.radians(np.asarray(v_deg, dtype=float))
    theta = np.linalg.norm(v)
    if theta < 1e-300:
        return np.eye(3)
    k = v / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def matrix_to_rotvec(r: np.ndarray) -> np.ndarray:
    """Axis-angle vector (degrees) of a rotation matrix. Inverse of rotvec_to_matrix."""
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-10:
        # first-order: R ~ I + skew(v)
        v = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        return np.degrees(v)
    if np.pi - theta < 1e-6:
        # near 180 deg: axis from the dominant column of R + I
        m = r + np.eye(3)
        k = m[:, np.argmax(np.diag(m))]
        k = k / np.linalg.norm(k)
        # fix sign to agree with the generic formula where it is stable
        s = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if np.dot(k, s) < 0:
            k = -k
        return np.degrees(theta * k)
    k = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / (2 * np.sin(theta))
    return np.degrees(theta * k)


def euler_xyz_fixed(r: np.ndarray) -> np.ndarray:
    """Fixed-axis XYZ Euler angles (deg): R = Rz(rz) Ry(ry) Rx(rx)."""
    ry = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    if abs(abs(r[2, 0]) - 1.0) < 1e-12:
        # gimbal lock: fold everything into rx
        rx = np.arctan2(-r[1, 2], r[1, 1])
        rz = 0.0
    else:
        rx = np.arctan2(r[2, 1], r[2, 2])
        rz = np.arctan2(r[1, 0], r[0, 0])
    return np.degrees([rx, ry, rz])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_transform(rng: np.random.Generator, max_translation: float = 100.0) -> RigidTransform3D:
    return RigidTransform3D(
        nearest_rotation(random_rotation(rng)),
        rng.uniform(-max_translation, max_translation, size=3),
    )


@dataclass(frozen=True)
class PoseError:
    """Translational (mm) and rotational (deg) error between two poses.

    geodesic_angle is the convention-free rotational metric; the per-axis
    (rx, ry, rz) split depends on the Euler convention documented above.
    """

    tx: float
    ty: float
    tz: float
    euclidean_distance: float
    rx: float
    ry: float
    rz: float
    geodesic_angle: float

    @property
    def translational(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    @property
    def rotational(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz])


def pose_error(estimated: RigidTransform3D, ground_truth: RigidTransform3D) -> PoseError:
    """Signed per-axis + ED translational error and per-axis + GA rotational error."""
    dt = estimated.translation - ground_truth.translation
    r_err = estimated.rotation @ ground_truth.rotation.T
    # atan2(sin, cos) form: accurate near 0 and 180 deg, unlike acos(trace)
    cos_t = (np.trace(r_err) - 1.0) / 2.0
    skew = np.array(
        [r_err[2, 1] - r_err[1, 2], r_err[0, 2] - r_err[2, 0], r_err[1, 0] - r_err[0, 1]]
    )
    sin_t = np.linalg.norm(skew) / 2.0
    ga = np.degrees(np.arctan2(sin_t, cos_t))
    if np.allclose(r_err, np.eye(3), atol=1e-15) and np.allclose(dt, 0.0):
        return PoseError(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    rx, ry, rz = euler_xyz_fixed(r_err)
    return PoseError(
        tx=float(dt[0]),
        ty=float(dt[1]),
        tz=float(dt[2]),
        euclidean_distance=float(np.linalg.norm(dt)),
        rx=float(rx),
        ry=float(ry),
        rz=float(rz),
        geodesic_angle=float(ga),
    )
