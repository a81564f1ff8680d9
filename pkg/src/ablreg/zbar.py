"""Z-bar fiducial geometry and plane-intersection triangulation.

A Z-bar is three coplanar wires: AB and CD parallel, joined by the
diagonal BC. The US image plane cuts the three wires in collinear points
p1, p2, p3; the distance ratio along the image line locates the plane's
crossing of the diagonal in 3D (triangle similarity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COPLANAR_TOL_MM = 0.01
PARALLEL_TOL_DEG = 0.1
COLLINEAR_TOL_MM = 0.2


class DegenerateObservationError(ValueError):
    pass


class InconsistentObservationError(ValueError):
    pass


@dataclass(frozen=True)
class ZBarFiducial:
    """Wire endpoints A,B,C,D in the phantom frame F_vol (mm)."""

    fiducial_id: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        pts = {}
        for name in "abcd":
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,):
                raise ValueError(f"endpoint {name} must be a 3-vector")
            v.flags.writeable = False
            pts[name] = v
            object.__setattr__(self, name, v)
        # coplanarity: distance of D from plane(A, B, C)
        n = np.cross(pts["b"] - pts["a"], pts["c"] - pts["a"])
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            raise ValueError("A, B, C are collinear; not a valid Z-bar")
        dist = abs(np.dot(pts["d"] - pts["a"], n / nn))
        if dist > COPLANAR_TOL_MM:
            raise ValueError(f"endpoints not coplanar: D is {dist:.4f} mm off the ABC plane")
        u = pts["b"] - pts["a"]
        v = pts["d"] - pts["c"]
        cosang = abs(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
        ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
        if ang > PARALLEL_TOL_DEG:
            raise ValueError(f"wires AB and CD not parallel ({ang:.3f} deg apart)")


@dataclass(frozen=True)
class ZBarObservation:
    """Image-plane intersections (2D, mm) with wires AB, BC, CD."""

    fiducial_id: int
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray

    def __post_init__(self):
        for name in ("p1", "p2", "p3"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (2,):
                raise ValueError(f"{name} must be a 2-vector in image mm coordinates")
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        # collinearity: perpendicular distance of p2 from line p1-p3
        u = self.p3 - self.p1
        un = np.linalg.norm(u)
        if un > 1e-12:
            w = self.p2 - self.p1
            perp = abs(w[0] * u[1] - w[1] * u[0]) / un
            if perp > COLLINEAR_TOL_MM:
                raise ValueError(f"p1,p2,p3 not collinear: p2 is {perp:.3f} mm off the p1-p3 line")


def zbar_locate(fiducial: ZBarFiducial, obs: ZBarObservation) -> np.ndarray:
    """3D point on the diagonal BC where the image plane crosses it (F_vol, mm).

    Ratio r = |p2-p1| / |p3-p1| measured in image millimetres, so
    anisotropic pixel spacing cannot bias it.
    """
    span = float(np.linalg.norm(obs.p3 - obs.p1))
    if span < 0.5:
        raise DegenerateObservationError(
            f"p1-p3 span {span:.3f} mm < 0.5 mm: image plane nearly parallel to the wire layer"
        )
    r = float(np.linalg.norm(obs.p2 - obs.p1)) / span
    if r < -0.05 or r > 1.05:
        raise InconsistentObservationError(f"intersection ratio {r:.3f} outside [-0.05, 1.05]")
    r = min(max(r, 0.0), 1.0)
    return fiducial.b + r * (fiducial.c - fiducial.b)
