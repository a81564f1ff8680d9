"""Evaluation metrics: vessel centerline distance (D_cl) and landmark
error (TRE / LD).

D_cl is DIRECTED (first argument onto the second) point-to-segment
distance by default; a symmetric variant is available behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from .geometry import RigidTransform3D
from .tps import TpsWarp, tps_apply


@dataclass(frozen=True)
class Centerline:
    """A set of vessel centreline polylines (mm) in a tagged frame."""

    polylines: tuple
    frame: str = "unknown"

    def __post_init__(self):
        lines = []
        for pl in self.polylines:
            a = np.asarray(pl, dtype=float)
            if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] < 2:
                raise ValueError("each polyline must be (N>=2, 3)")
            if not np.all(np.isfinite(a)):
                raise ValueError("polyline contains non-finite coordinates")
            a.flags.writeable = False
            lines.append(a)
        object.__setattr__(self, "polylines", tuple(lines))

    def vertices(self) -> np.ndarray:
        return np.vstack(self.polylines)

    def segments(self) -> Tuple[np.ndarray, np.ndarray]:
        starts, ends = [], []
        for pl in self.polylines:
            starts.append(pl[:-1])
            ends.append(pl[1:])
        return np.vstack(starts), np.vstack(ends)

    def mapped(self, mapping) -> "Centerline":
        return Centerline(tuple(_apply_mapping(mapping, pl) for pl in self.polylines), self.frame)

    def to_json_dict(self) -> dict:
        return {"frame": self.frame, "polylines": [pl.tolist() for pl in self.polylines]}

    @staticmethod
    def from_json_dict(d: dict) -> "Centerline":
        return Centerline(tuple(np.asarray(pl, dtype=float) for pl in d["polylines"]), d.get("frame", "unknown"))


@dataclass(frozen=True)
class LandmarkSet:
    """Named 3D landmarks; pairing across sets is by name."""

    landmarks: Dict[str, np.ndarray]
    frame: str = "unknown"

    def __post_init__(self):
        lm = {}
        for name, p in self.landmarks.items():
            a = np.asarray(p, dtype=float)
            if a.shape != (3,):
                raise ValueError(f"landmark {name!r} must be a 3-vector")
            a.flags.writeable = False
            lm[str(name)] = a
        object.__setattr__(self, "landmarks", lm)

    def mapped(self, mapping) -> "LandmarkSet":
        pts = np.array(list(self.landmarks.values()))
        out = _apply_mapping(mapping, pts)
        return LandmarkSet({n: out[i] for i, n in enumerate(self.landmarks)}, self.frame)

    def to_json_dict(self) -> dict:
        return {"frame": self.frame, "landmarks": {k: v.tolist() for k, v in self.landmarks.items()}}

    @staticmethod
    def from_json_dict(d: dict) -> "LandmarkSet":
        return LandmarkSet(
            {k: np.asarray(v, dtype=float) for k, v in d["landmarks"].items()},
            d.get("frame", "unknown"),
        )


Mapping = Union[None, RigidTransform3D, TpsWarp, Callable[[np.ndarray], np.ndarray]]


def _apply_mapping(mapping: Mapping, points: np.ndarray) -> np.ndarray:
    if mapping is None:
        return np.asarray(points, dtype=float)
    if isinstance(mapping, RigidTransform3D):
        return mapping.apply(points)
    if isinstance(mapping, TpsWarp):
        return tps_apply(mapping, points)
    if callable(mapping):
        return np.asarray(mapping(points), dtype=float)
    raise TypeError(f"unsupported mapping type {type(mapping)!r}")


def _point_to_segments(points: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Min distance of each point to the closest of the segments [p_j, q_j]."""
    d = q - p  # (S, 3)
    len2 = np.square(d).sum(axis=1)
    len2 = np.where(len2 > 0, len2, 1.0)
    # t (N, S): projection parameter clamped to the segment
    t = np.clip(((points[:, None, :] - p[None, :, :]) * d[None, :, :]).sum(axis=2) / len2[None, :], 0.0, 1.0)
    proj = p[None, :, :] + t[:, :, None] * d[None, :, :]
    dist = np.linalg.norm(points[:, None, :] - proj, axis=2)
    return dist.min(axis=1)


def centerline_distance(
    a: Centerline, b: Centerline, symmetric: bool = False
) -> Tuple[float, float, np.ndarray]:
    """Directed D_cl: for each vertex of a, distance to the nearest point on
    any SEGMENT of b. Returns (mean, sd, per-point distances)."""
    if a.frame != b.frame:
        raise ValueError(f"centerlines are in different frames: {a.frame!r} vs {b.frame!r}")
    if not a.polylines or not b.polylines:
        raise ValueError("empty centerline")
    p, q = b.segments()
    dists = _point_to_segments(a.vertices(), p, q)
    if symmetric:
        p2, q2 = a.segments()
        dists = np.concatenate([dists, _point_to_segments(b.vertices(), p2, q2)])
    return float(dists.mean()), float(dists.std()), dists


def landmark_error(
    a: LandmarkSet, b: LandmarkSet, mapping: Mapping = None
) -> Tuple[float, float, Dict[str, float]]:
    """Euclidean distance per common landmark name after mapping a's points
    through the supplied transform/warp. Returns (mean, sd, per-landmark)."""
    names = sorted(set(a.landmarks) & set(b.landmarks))
    if not names:
        raise ValueError("no common landmark names between the two sets")
    pa = _apply_mapping(mapping, np.array([a.landmarks[n] for n in names]))
    pb = np.array([b.landmarks[n] for n in names])
    d = np.linalg.norm(pa - pb, axis=1)
    return float(d.mean()), float(d.std()), {n: float(d[i]) for i, n in enumerate(names)}
