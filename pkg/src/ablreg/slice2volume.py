"""Time-dependent rigid 2D-3D US registration.

The learned regressor referenced by the surrounding workflow is replaced
by a classical intensity optimizer with the same interface contract:
inputs are a tracked frame and a 3D US volume, output is a refined slice
pose. Objective: normalized cross-correlation, optimized by coordinate
descent with golden-section line searches on a coarse-to-fine pyramid.
Fully deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .geometry import RigidTransform3D, compose, inverse, rotvec_to_matrix
from .volume import FusedView, SlicePose, Volume, mpr_slice, sample_trilinear_many

NO_OVERLAP = -np.inf  # sentinel score: < 25% valid overlap or zero variance


@dataclass(frozen=True)
class TrackedFrame:
    """2D US image with pixel spacing (mm), timestamp, and the tracked pose
    of its plane in the 3D US volume frame."""

    image: np.ndarray
    spacing: Tuple[float, float]
    timestamp: float
    tracked_pose: SlicePose

    def __post_init__(self):
        img = np.asarray(self.image, dtype=float)
        if img.ndim != 2:
            raise ValueError("frame image must be 2D")
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ValueError("pixel spacing must be positive")
        img.flags.writeable = False
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))


@dataclass
class S2VResult:
    refined_pose: SlicePose
    score: float
    iterations: int
    converged: bool
    runtime_seconds: float
    error: Optional[str] = None


@dataclass
class S2VOptions:
    pyramid_factors: Tuple[int, ...] = (4, 2, 1)
    sweeps_per_level: int = 3
    # search brackets per level (translation mm, rotation deg), coarse->fine
    brackets: Tuple[Tuple[float, float], ...] = ((8.0, 8.0), (3.0, 3.0), (1.0, 1.0))
    # golden-section tolerance per level, coarse->fine
    line_search_tol: Tuple[float, ...] = (0.05, 0.01, 0.002)
    min_overlap: float = 0.25
    warm_start: bool = True


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return NO_OVERLAP
    return float((a * b).sum() / (na * nb))


def similarity_ncc(
    slice_image: np.ndarray, volume: Volume, pose: SlicePose, min_overlap: float = 0.25
) -> float:
    """NCC between the image and the volume MPR at the pose, over valid
    pixels. Returns the NO_OVERLAP sentinel (-inf) when fewer than
    min_overlap of pixels are in-field, or when either side has zero
    variance (NCC undefined)."""
    img = np.asarray(slice_image, dtype=float)
    nv, nu = img.shape
    if pose.resolution != (nu, nv):
        pose = SlicePose(pose.transform, pose.extent, (nu, nv))
    mpr, valid = mpr_slice(volume, pose)
    frac = valid.mean()
    if frac < min_overlap:
        return NO_OVERLAP
    return _ncc(img[valid], mpr[valid])


def _perturbed_pose(init: SlicePose, params: np.ndarray) -> SlicePose:
    """6-vector params: translation (mm) along the slice's local axes and
    rotation (deg) about the local axes at the slice center."""
    w, h = init.extent
    c = np.array([w / 2.0, h / 2.0, 0.0])
    r = rotvec_to_matrix_local(params[3:])
    t = c - r @ c + params[:3]
    delta = RigidTransform3D(r, t)
    return SlicePose(compose(init.transform, delta), init.extent, init.resolution)


def rotvec_to_matrix_local(angles_deg: np.ndarray) -> np.ndarray:
    # small-angle composition about fixed local axes: Rz @ Ry @ Rx
    from .geometry import rot_x, rot_y, rot_z

    return rot_z(angles_deg[2]) @ rot_y(angles_deg[1]) @ rot_x(angles_deg[0])


def _downsample(img: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return img
    nv, nu = img.shape
    nv2, nu2 = nv // f, nu // f
    return img[: nv2 * f, : nu2 * f].reshape(nv2, f, nu2, f).mean(axis=(1, 3))


_GOLD = (np.sqrt(5.0) - 1.0) / 2.0


def _golden_max(fn, lo, hi, tol):
    a, b = lo, hi
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = fn(c), fn(d)
    while abs(b - a) > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = fn(d)
    x = (a + b) / 2.0
    return x, fn(x)


def register_slice(
    frame: TrackedFrame, volume: Volume, options: Optional[S2VOptions] = None
) -> S2VResult:
    """Refine the tracked pose by maximizing NCC against the volume MPR.

    Coordinate descent over the 6 rigid parameters with golden-section line
    searches, on a coarse-to-fine pyramid. The returned pose never scores
    below the initial pose (ascent guarantee)."""
    opts = options or S2VOptions()
    t0 = time.perf_counter()
    init = frame.tracked_pose
    nv, nu = frame.image.shape

    init_eval = SlicePose(init.transform, init.extent, (nu, nv))
    score_init = similarity_ncc(frame.image, volume, init_eval, opts.min_overlap)
    if score_init == NO_OVERLAP:
        raise ValueError("insufficient in-field overlap at the initial tracked pose")

    params = np.zeros(6)
    evals = 0
    for level, f in enumerate(opts.pyramid_factors):
        img_l = _downsample(frame.image, f)
        nv_l, nu_l = img_l.shape
        if nv_l < 4 or nu_l < 4:
            continue
        bt, br = opts.brackets[min(level, len(opts.brackets) - 1)]
        tols = opts.line_search_tol
        if np.isscalar(tols):
            tols = (float(tols),)
        ls_tol = tols[min(level, len(tols) - 1)]

        def objective(p):
            nonlocal evals
            evals += 1
            pose = _perturbed_pose(init, p)
            pose_l = SlicePose(pose.transform, init.extent, (nu_l, nv_l))
            mpr, valid = mpr_slice(volume, pose_l)
            if valid.mean() < opts.min_overlap:
                return NO_OVERLAP
            return _ncc(img_l[valid], mpr[valid])

        best = objective(params)
        for _ in range(opts.sweeps_per_level):
            improved = False
            for k in range(6):
                bracket = bt if k < 3 else br

                def fn1d(v, k=k):
                    p = params.copy()
                    p[k] = v
                    return objective(p)

                x, fx = _golden_max(fn1d, params[k] - bracket, params[k] + bracket, ls_tol)
                if fx > best:
                    params[k] = x
                    best = fx
                    improved = True
            if not improved:
                break

    refined = _perturbed_pose(init, params)
    refined_eval = SlicePose(refined.transform, init.extent, (nu, nv))
    score = similarity_ncc(frame.image, volume, refined_eval, opts.min_overlap)
    converged = True
    if not np.isfinite(score) or score < score_init:
        # ascent guarantee: never return a pose worse than the init. The
        # revert itself is not a failure (the init was already the best
        # known pose); only a non-finite final score marks non-convergence.
        converged = bool(np.isfinite(score))
        refined, score = init, score_init
    return S2VResult(
        refined_pose=SlicePose(refined.transform, init.extent, init.resolution),
        score=float(score),
        iterations=evals,
        converged=converged,
        runtime_seconds=time.perf_counter() - t0,
    )


def register_sequence(
    frames: List[TrackedFrame], volume: Volume, options: Optional[S2VOptions] = None
) -> List[S2VResult]:
    """Register a time-ordered sequence. Frame i is initialized at its tracked
    pose composed (on the LEFT, i.e. in the volume frame) with the correction
    refined o tracked^-1 from frame i-1. Per-frame failures are flagged, not
    fatal."""
    opts = options or S2VOptions()
    results: List[S2VResult] = []
    correction = RigidTransform3D.identity()
    for frame in frames:
        init_tf = compose(correction, frame.tracked_pose.transform) if opts.warm_start else frame.tracked_pose.transform
        warm = TrackedFrame(
            frame.image,
            frame.spacing,
            frame.timestamp,
            SlicePose(init_tf, frame.tracked_pose.extent, frame.tracked_pose.resolution),
        )
        try:
            res = register_slice(warm, volume, options)
        except (ValueError, RuntimeError) as e:
            results.append(
                S2VResult(
                    refined_pose=warm.tracked_pose,
                    score=float("nan"),
                    iterations=0,
                    converged=False,
                    runtime_seconds=0.0,
                    error=str(e),
                )
            )
            continue
        results.append(res)
        if opts.warm_start and res.converged:
            correction = compose(res.refined_pose.transform, inverse(frame.tracked_pose.transform))
    return results


def mpr_chain(
    result: S2VResult,
    t_rigid: RigidTransform3D,
    warp,
    ctmri: Volume,
    us_image: Optional[np.ndarray] = None,
    window: Tuple[float, float] = (0.0, 1.0),
    opacity_thresh: float = 0.1,
) -> FusedView:
    """CT/MRI view corresponding to the refined US frame.

    Each US pixel is mapped: refined pose (2D US -> 3D US frame), then
    t_rigid (3D US -> CT/MRI), then the optional TPS refinement, and the
    CT/MRI volume is sampled there. The live US image (if given) is fused
    as the overlay."""
    from .tps import TpsWarp, tps_apply

    pose = result.refined_pose
    pts = pose.grid_world().reshape(-1, 3)
    pts = t_rigid.apply(pts)
    if warp is not None:
        if not isinstance(warp, TpsWarp):
            raise TypeError("warp must be a TpsWarp or None")
        pts = tps_apply(warp, pts)
    vals, valid = sample_trilinear_many(ctmri, pts)
    nu, nv = pose.resolution
    base = vals.reshape(nv, nu)
    base_valid = valid.reshape(nv, nu)
    if us_image is not None:
        overlay = np.asarray(us_image, dtype=float)
        if overlay.shape != base.shape:
            raise ValueError("US image resolution must match the slice pose resolution")
    else:
        overlay = np.zeros_like(base)
    lo, hi = window
    ramp = np.clip((overlay - opacity_thresh) / max(hi - opacity_thresh, 1e-12), 0.0, 1.0)
    alpha = np.where(overlay >= opacity_thresh, ramp, 0.0)
    return FusedView(
        base=base,
        base_valid=base_valid,
        overlay=overlay,
        overlay_alpha=alpha,
        blend="alpha",
        clip_depth=0.0,
        window=(float(lo), float(hi)),
    )
