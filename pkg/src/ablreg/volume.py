"""Regular 3D scalar volumes, trilinear sampling, MPR slicing and the
front-clipped fused view.

Index convention: scalars[ix, iy, iz]; world = origin + direction @ (spacing * index).
Slice images are arrays [row, col] = [v, u].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .geometry import RigidTransform3D

MODALITIES = ("CT", "MRI", "US3D", "MASK")

OUTSIDE = None  # sentinel returned by sample_trilinear for out-of-field queries


@dataclass(frozen=True)
class Volume:
    scalars: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray
    modality: str = "CT"

    def __post_init__(self):
        s = np.asarray(self.scalars)
        if s.ndim != 3:
            raise ValueError("scalars must be a 3D array")
        if s.dtype not in (np.float32, np.uint8):
            s = s.astype(np.float32)
        sp = np.asarray(self.spacing, dtype=float)
        org = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        if sp.shape != (3,) or np.any(sp <= 0):
            raise ValueError("spacing must be 3 positive components")
        if org.shape != (3,):
            raise ValueError("origin must be a 3-vector")
        if d.shape != (3, 3) or np.linalg.norm(d.T @ d - np.eye(3)) > 1e-6:
            raise ValueError("direction must be 3x3 orthonormal within 1e-6")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if self.modality == "MASK":
            vals = np.unique(s)
            if not np.all(np.isin(vals, [0, 1])):
                raise ValueError("MASK volumes must contain only {0, 1}")
        for arr in (s, sp, org, d):
            arr.flags.writeable = False
        object.__setattr__(self, "scalars", s)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", org)
        object.__setattr__(self, "direction", d)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.scalars.shape

    def world_from_index(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return (idx * self.spacing) @ self.direction.T + self.origin

    def index_from_world(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return ((pts - self.origin) @ self.direction) / self.spacing


def sample_trilinear_many(volume: Volume, points: np.ndarray):
    """Vectorized trilinear sampling at world points (N,3).

    Returns (values (N,) float, valid (N,) bool). A point is valid only when
    every index coordinate lies in [0, n-1]; invalid values are 0.
    """
    idx = volume.index_from_world(np.atleast_2d(points))
    nx, ny, nz = volume.dims
    dims = np.array([nx, ny, nz], dtype=float)
    # small slack so identity-like warps cannot invalidate boundary voxels
    # through floating-point residue in the index computation
    eps = 1e-9
    valid = np.all((idx >= -eps) & (idx <= dims - 1.0 + eps), axis=1)
    idx_c = np.clip(idx, 0.0, dims - 1.0)
    i0 = np.floor(idx_c).astype(int)
    i0 = np.minimum(i0, (dims - 2).astype(int).clip(min=0))
    f = idx_c - i0
    s = volume.scalars  # gathered corners upcast to float in the blend below
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c000 = s[x0, y0, z0]
    c100 = s[x1, y0, z0]
    c010 = s[x0, y1, z0]
    c110 = s[x1, y1, z0]
    c001 = s[x0, y0, z1]
    c101 = s[x1, y0, z1]
    c011 = s[x0, y1, z1]
    c111 = s[x1, y1, z1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    vals = c0 * (1 - fz) + c1 * fz
    vals = np.where(valid, vals, 0.0)
    return vals, valid


def sample_trilinear(volume: Volume, point) -> Optional[float]:
    """Trilinear interpolation at a single world point; OUTSIDE (None) if the
    point leaves the index box [0, n-1]^3."""
    vals, valid = sample_trilinear_many(volume, np.asarray(point, dtype=float).reshape(1, 3))
    if not valid[0]:
        return OUTSIDE
    return float(vals[0])


@dataclass(frozen=True)
class SlicePose:
    """Pose of a 2D image plane: transform maps image coords (x, y, 0) in mm
    into the volume's world frame."""

    transform: RigidTransform3D
    extent: Tuple[float, float]
    resolution: Tuple[int, int]

    def __post_init__(self):
        w, h = self.extent
        nu, nv = self.resolution
        if w <= 0 or h <= 0:
            raise ValueError("extent must be positive")
        if nu < 2 or nv < 2:
            raise ValueError("resolution must be at least 2x2")
        object.__setattr__(self, "extent", (float(w), float(h)))
        object.__setattr__(self, "resolution", (int(nu), int(nv)))

    def grid_world(self) -> np.ndarray:
        """World coordinates of all pixel centers, shape (nv, nu, 3)."""
        nu, nv = self.resolution
        w, h = self.extent
        u = np.linspace(0.0, w, nu)
        v = np.linspace(0.0, h, nv)
        uu, vv = np.meshgrid(u, v)  # (nv, nu)
        pts = np.stack([uu, vv, np.zeros_like(uu)], axis=-1).reshape(-1, 3)
        return self.transform.apply(pts).reshape(nv, nu, 3)

    @property
    def normal(self) -> np.ndarray:
        return self.transform.rotation[:, 2]

    def to_json_dict(self) -> dict:
        return {
            "transform": self.transform.to_json_dict(),
            "extent": list(self.extent),
            "resolution": list(self.resolution),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "SlicePose":
        return SlicePose(
            RigidTransform3D.from_json_dict(d["transform"]),
            tuple(d["extent"]),
            tuple(d["resolution"]),
        )


def mpr_slice(volume: Volume, pose: SlicePose):
    """Multi-planar reformation: resample the volume on the slice grid.

    Returns (image (nv, nu), valid (nv, nu) bool); OUTSIDE samples are masked
    rather than zero-filled so downstream metrics can exclude them.
    """
    nu, nv = pose.resolution
    pts = pose.grid_world().reshape(-1, 3)
    vals, valid = sample_trilinear_many(volume, pts)
    return vals.reshape(nv, nu), valid.reshape(nv, nu)


@dataclass(frozen=True)
class FusedView:
    """CT/MRI MPR base plus a front-clipped US overlay (MVR-style)."""

    base: np.ndarray
    base_valid: np.ndarray
    overlay: np.ndarray
    overlay_alpha: np.ndarray
    blend: str
    clip_depth: float
    window: Tuple[float, float]

    def __post_init__(self):
        if self.blend not in ("alpha", "checkerboard"):
            raise ValueError("blend must be 'alpha' or 'checkerboard'")
        if self.base.shape != self.overlay.shape:
            raise ValueError("base and overlay must share resolution")


# MIP step along the plane normal; fixed so enlarging clip_depth only adds
# samples (monotone overlay).
def _mip_depths(clip_depth: float, step: float) -> np.ndarray:
    if clip_depth < 0:
        raise ValueError("clip_depth must be >= 0")
    n = int(np.floor(clip_depth / step)) if clip_depth > 0 else 0
    return np.arange(n + 1) * step


def fused_mvr_view(
    base_vol: Volume,
    overlay_vol: Volume,
    pose: SlicePose,
    clip_depth: float = 30.0,
    window: Tuple[float, float] = (0.0, 1.0),
    opacity_thresh: float = 0.1,
    blend: str = "alpha",
) -> FusedView:
    """Fused MVR view: base MPR of the CT/MRI volume, overlay a maximum-
    intensity projection of the US volume from the viewing plane to
    clip_depth millimetres BEHIND it (the front half-space is excluded).

    Overlay opacity is a scalar ramp: 0 below opacity_thresh, then linear up
    to the window high end (stand-in for a full transfer function).
    """
    base, base_valid = mpr_slice(base_vol, pose)
    grid = pose.grid_world().reshape(-1, 3)
    normal = pose.normal
    step = float(np.min(overlay_vol.spacing)) / 2.0
    depths = _mip_depths(clip_depth, step)
    mip = np.full(grid.shape[0], -np.inf)
    any_valid = np.zeros(grid.shape[0], dtype=bool)
    for d in depths:
        vals, valid = sample_trilinear_many(overlay_vol, grid + d * normal)
        mip = np.where(valid, np.maximum(mip, vals), mip)
        any_valid |= valid
    mip = np.where(any_valid, mip, 0.0)
    nv, nu = base.shape
    overlay = mip.reshape(nv, nu)
    ov_valid = any_valid.reshape(nv, nu)

    lo, hi = window
    ramp = np.clip((overlay - opacity_thresh) / max(hi - opacity_thresh, 1e-12), 0.0, 1.0)
    alpha = np.where((overlay >= opacity_thresh) & ov_valid, ramp, 0.0)
    return FusedView(
        base=base,
        base_valid=base_valid,
        overlay=overlay,
        overlay_alpha=alpha,
        blend=blend,
        clip_depth=float(clip_depth),
        window=(float(lo), float(hi)),
    )


def fused_view_to_rgba(view: FusedView) -> np.ndarray:
    """8-bit RGBA composite: windowed gray base, orange overlay."""
    lo, hi = view.window
    g = np.clip((view.base - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    g = np.where(view.base_valid, g, 0.0)
    rgba = np.zeros(view.base.shape + (4,), dtype=np.uint8)
    gray = (g * 255).astype(np.uint8)
    rgba[..., 0] = gray
    rgba[..., 1] = gray
    rgba[..., 2] = gray
    rgba[..., 3] = 255
    a = view.overlay_alpha
    if view.blend == "checkerboard":
        nv, nu = view.base.shape
        yy, xx = np.mgrid[0:nv, 0:nu]
        checker = ((xx // 8 + yy // 8) % 2).astype(float)
        a = a * checker
    ov = np.clip((view.overlay - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    rgba[..., 0] = np.clip(gray * (1 - a) + 255 * ov * a, 0, 255).astype(np.uint8)
    rgba[..., 1] = np.clip(gray * (1 - a) + 160 * ov * a, 0, 255).astype(np.uint8)
    rgba[..., 2] = np.clip(gray * (1 - a) + 32 * ov * a, 0, 255).astype(np.uint8)
    return rgba


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    if image.ndim == 2:
        if image.dtype != np.uint8:
            image = np.clip(image, 0, 1)
            image = (image * 255).astype(np.uint8)
        Image.fromarray(image, mode="L").save(path)
    else:
        Image.fromarray(image, mode="RGBA").save(path)
