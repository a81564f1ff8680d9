"""Thin-plate-spline deformation with the 3D biharmonic kernel U(r) = r,
workspace-constrained control point generation, and incremental
drag-and-place updates.

Volume warping uses the pull-back convention: the output voxel at x takes
the input value at f(x), i.e. the fitted warp maps output space to input
space. This direction is fixed package-wide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .volume import Volume, sample_trilinear_many


class DegenerateControlPointsError(ValueError):
    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


def _kernel(r: np.ndarray) -> np.ndarray:
    return r  # 3D biharmonic kernel U(r) = r


def _kernel_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (
        np.square(a).sum(axis=1)[:, None]
        + np.square(b).sum(axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    return _kernel(np.sqrt(np.maximum(d2, 0.0)))


@dataclass(frozen=True)
class TpsWarp:
    """Fitted warp f(x) = affine @ [1; x] + sum_i w_i U(|x - s_i|)."""

    control_sources: np.ndarray  # (M, 3)
    control_targets: np.ndarray  # (M, 3)
    kernel_weights: np.ndarray  # (M, 3)
    affine: np.ndarray  # (3, 4): columns [constant | linear part]
    regularization: float = 0.0

    def __post_init__(self):
        for name, shape1 in (("control_sources", 3), ("control_targets", 3), ("kernel_weights", 3)):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim != 2 or v.shape[1] != shape1:
                raise ValueError(f"{name} must be (M, 3)")
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        a = np.asarray(self.affine, dtype=float)
        if a.shape != (3, 4):
            raise ValueError("affine must be (3, 4)")
        a.flags.writeable = False
        object.__setattr__(self, "affine", a)
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")

    def to_json_dict(self) -> dict:
        """Refit-ready serialization: sources, targets, lambda."""
        return {
            "control_sources": self.control_sources.tolist(),
            "control_targets": self.control_targets.tolist(),
            "regularization": self.regularization,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "TpsWarp":
        return tps_fit(
            np.asarray(d["control_sources"], dtype=float),
            np.asarray(d["control_targets"], dtype=float),
            regularization=float(d.get("regularization", 0.0)),
        )

    def bending_energy(self) -> float:
        k = _kernel_matrix(self.control_sources, self.control_sources)
        return float(np.trace(self.kernel_weights.T @ k @ self.kernel_weights))


def _check_configuration(sources: np.ndarray) -> None:
    m = len(sources)
    if m < 4:
        raise DegenerateControlPointsError(f"need at least 4 control points, got {m}")
    # duplicates
    d2 = (
        np.square(sources).sum(axis=1)[:, None]
        + np.square(sources).sum(axis=1)[None, :]
        - 2.0 * sources @ sources.T
    )
    np.fill_diagonal(d2, np.inf)
    dup = np.argwhere(d2 < 1e-16)
    if len(dup):
        pairs = sorted({tuple(sorted(p)) for p in dup.tolist()})
        raise DegenerateControlPointsError(
            f"duplicate control points at index pairs {pairs[:5]}", offending=[p[0] for p in pairs]
        )
    p = np.hstack([np.ones((m, 1)), sources])
    if np.linalg.matrix_rank(p, tol=1e-9 * max(1.0, np.abs(sources).max())) < 4:
        raise DegenerateControlPointsError(
            "control points are coplanar (or collinear); TPS system is singular",
            offending=list(range(m)),
        )


def tps_fit(sources, targets, regularization: float = 0.0) -> TpsWarp:
    """Solve [[K + lambda*I, P], [P^T, 0]] [w; a] = [targets; 0]."""
    s = np.asarray(sources, dtype=float)
    t = np.asarray(targets, dtype=float)
    if s.shape != t.shape or s.ndim != 2 or s.shape[1] != 3:
        raise ValueError("sources and targets must both be (M, 3)")
    _check_configuration(s)
    m = len(s)
    k = _kernel_matrix(s, s) + regularization * np.eye(m)
    p = np.hstack([np.ones((m, 1)), s])
    sys = np.zeros((m + 4, m + 4))
    sys[:m, :m] = k
    sys[:m, m:] = p
    sys[m:, :m] = p.T
    rhs = np.vstack([t, np.zeros((4, 3))])
    try:
        sol = np.linalg.solve(sys, rhs)
    except np.linalg.LinAlgError as e:
        raise DegenerateControlPointsError(f"TPS system singular: {e}") from e
    w = sol[:m]
    a = sol[m:].T  # (3, 4)
    return TpsWarp(
        control_sources=s,
        control_targets=t,
        kernel_weights=w,
        affine=a,
        regularization=float(regularization),
    )


def identity_warp(sources) -> TpsWarp:
    s = np.asarray(sources, dtype=float)
    return tps_fit(s, s, regularization=0.0)


def tps_apply(warp: TpsWarp, points) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    k = _kernel_matrix(p, warp.control_sources)
    out = (
        warp.affine[:, 0][None, :]
        + p @ warp.affine[:, 1:].T
        + k @ warp.kernel_weights
    )
    return out.reshape(np.asarray(points, dtype=float).shape)


def tps_apply_volume(warp: TpsWarp, volume: Volume, reference: Optional[Volume] = None) -> Volume:
    """Resample by inverse mapping: output voxel x <- sample(input, f(x)).

    The output grid is the reference volume's grid (defaults to the input's
    own grid). Out-of-field samples are zero.
    """
    ref = reference if reference is not None else volume
    nx, ny, nz = ref.dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(float)
    world = ref.world_from_index(idx)
    mapped = tps_apply(warp, world)
    vals, _ = sample_trilinear_many(volume, mapped)
    scalars = vals.reshape(nx, ny, nz).astype(np.float32)
    modality = volume.modality
    if modality == "MASK":
        scalars = (scalars >= 0.5).astype(np.uint8)
    return Volume(
        scalars=scalars,
        spacing=ref.spacing,
        origin=ref.origin,
        direction=ref.direction,
        modality=modality,
    )


ANCHOR = "anchor"
MOVABLE = "movable"


@dataclass(frozen=True)
class ControlPoint:
    id: int
    position: np.ndarray
    displacement: np.ndarray
    role: str

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        disp = np.asarray(self.displacement, dtype=float)
        if self.role not in (ANCHOR, MOVABLE):
            raise ValueError(f"role must be {ANCHOR!r} or {MOVABLE!r}")
        if self.role == ANCHOR and np.any(disp != 0.0):
            raise ValueError("anchor points must have zero displacement")
        pos.flags.writeable = False
        disp.flags.writeable = False
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "displacement", disp)


@dataclass(frozen=True)
class ControlPointSet:
    points: tuple

    def __post_init__(self):
        pts = tuple(self.points)
        ids = [p.id for p in pts]
        if len(set(ids)) != len(ids):
            raise ValueError("control point ids must be unique")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def get(self, point_id: int) -> ControlPoint:
        for p in self.points:
            if p.id == point_id:
                return p
        raise KeyError(f"no control point with id {point_id}")

    def with_displacement(self, point_id: int, displacement) -> "ControlPointSet":
        target = self.get(point_id)
        if target.role == ANCHOR:
            raise ValueError(f"control point {point_id} is an anchor and cannot be dragged")
        new = ControlPoint(
            target.id, target.position, np.asarray(displacement, dtype=float), target.role
        )
        return ControlPointSet(tuple(new if p.id == point_id else p for p in self.points))

    @property
    def sources(self) -> np.ndarray:
        return np.array([p.position for p in self.points])

    @property
    def targets(self) -> np.ndarray:
        return np.array([p.position + p.displacement for p in self.points])

    def to_json_dict(self) -> dict:
        return {
            "points": [
                {
                    "id": p.id,
                    "position": p.position.tolist(),
                    "displacement": p.displacement.tolist(),
                    "role": p.role,
                }
                for p in self.points
            ]
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ControlPointSet":
        return ControlPointSet(
            tuple(
                ControlPoint(
                    int(p["id"]),
                    np.asarray(p["position"], dtype=float),
                    np.asarray(p.get("displacement", [0, 0, 0]), dtype=float),
                    p["role"],
                )
                for p in d["points"]
            )
        )


@dataclass(frozen=True)
class OrientedBox:
    """Physician workspace: center (mm), orthonormal axes (columns), half sizes (mm)."""

    center: np.ndarray
    axes: np.ndarray
    half_sizes: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        a = np.asarray(self.axes, dtype=float)
        h = np.asarray(self.half_sizes, dtype=float)
        if np.linalg.norm(a.T @ a - np.eye(3)) > 1e-6:
            raise ValueError("axes must be orthonormal")
        if np.any(h <= 0):
            raise ValueError("half sizes must be positive")
        for v in (c, a, h):
            v.flags.writeable = False
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "axes", a)
        object.__setattr__(self, "half_sizes", h)

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = (np.atleast_2d(points) - self.center) @ self.axes
        return np.all(np.abs(local) <= self.half_sizes + 1e-9, axis=1)

    def to_json_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "axes": self.axes.tolist(),
            "half_sizes": self.half_sizes.tolist(),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "OrientedBox":
        return OrientedBox(
            np.asarray(d["center"], dtype=float),
            np.asarray(d["axes"], dtype=float),
            np.asarray(d["half_sizes"], dtype=float),
        )


def _mask_boundary_world(mask: Volume) -> np.ndarray:
    m = mask.scalars.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    idx = np.argwhere(m & ~interior).astype(float)
    return mask.world_from_index(idx)


def _thin_points(points: np.ndarray, min_spacing: float) -> np.ndarray:
    """Greedy deterministic thinning: keep points at least min_spacing apart."""
    if len(points) == 0:
        return points
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    pts = points[order]
    cell = min_spacing / np.sqrt(3.0)
    taken = {}
    kept = []
    for p in pts:
        key = tuple(np.floor(p / cell).astype(int))
        ok = True
        for dx in (-2, -1, 0, 1, 2):
            for dy in (-2, -1, 0, 1, 2):
                for dz in (-2, -1, 0, 1, 2):
                    nb = (key[0] + dx, key[1] + dy, key[2] + dz)
                    for q in taken.get(nb, ()):
                        if np.linalg.norm(p - q) < min_spacing:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            taken.setdefault(key, []).append(p)
            kept.append(p)
    return np.array(kept)


def generate_control_points(
    liver_mask: Volume, workspace: OrientedBox, spacing: float
) -> ControlPointSet:
    """Movable points: regular grid (given spacing) on liver foreground inside
    the workspace box. Anchor points: liver boundary outside the workspace,
    thinned to the same spacing, pinning far-field tissue. Deterministic."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if not liver_mask.scalars.any():
        raise ValueError("liver mask is empty")

    h = workspace.half_sizes
    grids = [np.arange(-h[i], h[i] + 1e-9, spacing) for i in range(3)]
    gu, gv, gw = np.meshgrid(*grids, indexing="ij")
    local = np.stack([gu, gv, gw], axis=-1).reshape(-1, 3)
    world = local @ workspace.axes.T + workspace.center
    vals, valid = sample_trilinear_many(liver_mask, world)
    movable = world[valid & (vals >= 0.5)]
    if len(movable) == 0:
        raise ValueError("workspace does not intersect the liver mask")

    boundary = _mask_boundary_world(liver_mask)
    outside = boundary[~workspace.contains(boundary)]
    anchors = _thin_points(outside, spacing) if len(outside) else np.empty((0, 3))

    points = []
    pid = 0
    for p in movable:
        points.append(ControlPoint(pid, p, np.zeros(3), MOVABLE))
        pid += 1
    for p in anchors:
        points.append(ControlPoint(pid, p, np.zeros(3), ANCHOR))
        pid += 1
    return ControlPointSet(tuple(points))


def warp_from_control_points(cps: ControlPointSet, regularization: float = 0.0) -> TpsWarp:
    return tps_fit(cps.sources, cps.targets, regularization=regularization)


def drag_update(
    cps: ControlPointSet,
    point_id: int,
    new_displacement,
    regularization: float = 0.0,
) -> Tuple[ControlPointSet, TpsWarp]:
    """Set one movable point's displacement and refit the warp over all
    control points. Full dense refit: interactive for M <= ~500."""
    updated = cps.with_displacement(point_id, new_displacement)
    return updated, warp_from_control_points(updated, regularization)
