"""Rigid point-set registration of vessel surface clouds.

Surface points come from binary vessel masks; alignment uses rigid
coherent point drift: EM over a Gaussian mixture centred on the moving
cloud with a uniform outlier component, closed-form rigid M-step via SVD
of the weighted cross-covariance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .geometry import RigidTransform3D, nearest_rotation
from .volume import Volume


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    frame: str = "unknown"
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError("points must be (N, 3)")
        if not np.all(np.isfinite(p)):
            raise ValueError("points contain non-finite coordinates")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)

    def __len__(self):
        return self.points.shape[0]

    def to_json_dict(self) -> dict:
        return {"frame": self.frame, "points": self.points.tolist()}

    @staticmethod
    def from_json_dict(d: dict) -> "PointCloud":
        return PointCloud(np.asarray(d["points"], dtype=float), frame=d.get("frame", "unknown"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @staticmethod
    def load(path) -> "PointCloud":
        return PointCloud.from_json_dict(json.loads(Path(path).read_text()))


@dataclass
class CpdConfig:
    outlier_weight: float = 0.1
    max_iterations: int = 200
    sigma2_init: Optional[float] = None  # None = AUTO (mean squared inter-cloud distance / 3)
    tolerance: float = 1e-6
    max_points: int = 3000

    def __post_init__(self):
        if not (0.0 <= self.outlier_weight < 1.0):
            raise ValueError("outlier_weight must be in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.sigma2_init is not None and self.sigma2_init <= 0:
            raise ValueError("sigma2_init must be positive or None (AUTO)")
        if self.max_points < 4:
            raise ValueError("max_points must be >= 4")


@dataclass
class CpdDiagnostics:
    iterations: int
    sigma2: float
    loglik_trace: List[float]
    monotone: bool
    correspondence_entropy: float
    converged: bool


def _stride_subsample(points: np.ndarray, target: int) -> np.ndarray:
    """Deterministic even-stride subsample after a lexicographic sort."""
    if len(points) <= target:
        return points
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    pick = np.linspace(0, len(points) - 1, target).round().astype(int)
    return points[order[pick]]


def extract_surface_points(mask: Volume, target_count: int = 3000) -> PointCloud:
    """World-space centers of boundary voxels (foreground voxels with at
    least one six-connected background neighbor), deterministically
    subsampled to at most target_count."""
    if mask.modality != "MASK":
        raise ValueError("extract_surface_points expects a MASK volume")
    m = mask.scalars.astype(bool)
    if not m.any():
        raise ValueError("mask is empty")
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    boundary = m & ~interior
    idx = np.argwhere(boundary).astype(float)
    pts = mask.world_from_index(idx)
    pts = _stride_subsample(pts, target_count)
    return PointCloud(pts, frame=mask.modality)


def register_rigid_cpd(
    source: PointCloud, target: PointCloud, config: Optional[CpdConfig] = None
) -> Tuple[RigidTransform3D, CpdDiagnostics]:
    """Rigid CPD: returns the transform mapping source into the target frame.

    E-step: soft correspondences under an isotropic Gaussian kernel plus a
    uniform outlier component weighted by outlier_weight. M-step: closed-form
    rigid update from the SVD of the weighted cross-covariance (reflection
    guarded), then the sigma^2 update. The log-likelihood trace is recorded
    and checked for EM monotonicity.
    """
    cfg = config or CpdConfig()
    if len(source) < 4 or len(target) < 4:
        raise ValueError("registration needs at least 4 points per cloud")
    y = _stride_subsample(source.points, cfg.max_points)
    x = _stride_subsample(target.points, cfg.max_points)
    m, n = len(y), len(x)
    d = 3
    w = cfg.outlier_weight

    if cfg.sigma2_init is None:
        # mean squared distance over all source/target pairs, per dimension
        sx = x.sum(axis=0)
        sy = y.sum(axis=0)
        sigma2 = (
            m * np.square(x).sum() + n * np.square(y).sum() - 2.0 * float(sx @ sy)
        ) / (d * m * n)
    else:
        sigma2 = float(cfg.sigma2_init)

    from scipy.spatial import cKDTree

    xsq = np.square(x).sum(axis=1)
    tree_x = cKDTree(x)
    diag_x = float(np.linalg.norm(x.max(axis=0) - x.min(axis=0)))
    chi = 50.0  # pairs beyond d2 > 2*sigma2*chi contribute < exp(-50); negligible

    r = np.eye(3)
    t = np.zeros(3)
    if cfg.sigma2_init is None and min(m, n) > 1500:
        # coarse initialisation on thin subsamples keeps the full-resolution
        # EM in the cheap small-sigma regime from the first iteration
        coarse_cfg = CpdConfig(
            outlier_weight=w,
            max_iterations=cfg.max_iterations,
            tolerance=max(cfg.tolerance, 1e-5),
            max_points=750,
        )
        coarse, cdiag = register_rigid_cpd(
            PointCloud(y, frame=source.frame),
            PointCloud(x, frame=target.frame),
            coarse_cfg,
        )
        r, t = coarse.rotation, coarse.translation
        nn = tree_x.query(x, k=2)[0][:, 1]
        sigma2 = max(3.0 * cdiag.sigma2, float(np.mean(nn)) ** 2)

    loglik_trace: List[float] = []
    monotone = True
    converged = False
    it = 0
    p_mat = np.zeros((m, n))

    for it in range(1, cfg.max_iterations + 1):
        ty = y @ r.T + t
        c = (2.0 * np.pi * sigma2) ** (d / 2.0) * w * m / ((1.0 - w) * n) if w > 0 else 0.0
        radius = np.sqrt(2.0 * sigma2 * chi)
        sparse = radius < 0.15 * diag_x
        if sparse:
            pairs = cKDTree(ty).sparse_distance_matrix(
                tree_x, radius, output_type="ndarray"
            )
            rows, cols = pairs["i"], pairs["j"]
            gv = np.exp(pairs["v"] ** 2 / (-2.0 * sigma2))
            den = np.bincount(cols, weights=gv, minlength=n) + c
        else:
            g = ty @ x.T
            g *= -2.0
            g += np.square(ty).sum(axis=1)[:, None]
            g += xsq[None, :]
            np.maximum(g, 0.0, out=g)
            g *= -0.5 / sigma2
            np.exp(g, out=g)
            den = g.sum(axis=0) + c
        den = np.maximum(den, np.finfo(float).tiny)
        ll = float(np.log(den).sum()) + n * (
            np.log(1.0 - w) - np.log(m) - (d / 2.0) * np.log(2.0 * np.pi * sigma2)
        )
        if loglik_trace and ll < loglik_trace[-1] - 1e-9:
            monotone = False
        if not np.isfinite(ll):
            raise RuntimeError(f"non-finite CPD likelihood at iteration {it}")
        if loglik_trace and abs(ll - loglik_trace[-1]) < cfg.tolerance * max(1.0, abs(loglik_trace[-1])):
            loglik_trace.append(ll)
            converged = True
            break
        loglik_trace.append(ll)

        if sparse:
            pv = gv / den[cols]
            np_tot = float(pv.sum())
            if np_tot <= 0:
                raise RuntimeError("CPD correspondence mass collapsed to zero")
            p1 = np.bincount(rows, weights=pv, minlength=m)
            pt1 = np.bincount(cols, weights=pv, minlength=n)
            mu_x = (pt1 @ x) / np_tot
            mu_y = (p1 @ y) / np_tot
            xc = x - mu_x
            yc = y - mu_y
            a = (xc[cols] * pv[:, None]).T @ yc[rows]
            p_mat = (pv, pt1)
        else:
            p_mat = g / den[None, :]
            np_tot = float(p_mat.sum())
            if np_tot <= 0:
                raise RuntimeError("CPD correspondence mass collapsed to zero")
            p1 = p_mat.sum(axis=1)  # (m,)
            pt1 = p_mat.sum(axis=0)  # (n,)
            mu_x = (pt1 @ x) / np_tot
            mu_y = (p1 @ y) / np_tot
            xc = x - mu_x
            yc = y - mu_y
            a = xc.T @ (p_mat.T @ yc)
        u, s, vt = np.linalg.svd(a)
        cdiag = np.ones(3)
        if np.linalg.det(u @ vt) < 0:
            cdiag[-1] = -1.0
        r = u @ np.diag(cdiag) @ vt
        r = nearest_rotation(r)
        t = mu_x - r @ mu_y

        trace_x = float(pt1 @ np.square(xc).sum(axis=1))
        trace_y = float(p1 @ np.square(yc).sum(axis=1))
        sigma2_new = (trace_x - 2.0 * float(np.trace(a.T @ r)) + trace_y) / (np_tot * d)
        sigma2 = max(sigma2_new, 0.0)
        if sigma2 < 1e-12:
            sigma2 = 1e-12
            converged = True
            break

    # posterior entropy over M gaussian components + outlier class, averaged
    if isinstance(p_mat, tuple):
        p_vals, p_colsum = p_mat
    else:
        p_vals = p_mat.ravel()
        p_colsum = p_mat.sum(axis=0)
    out_mass = np.clip(1.0 - p_colsum, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(p_vals > 0, p_vals * np.log(p_vals), 0.0).sum()
        h += np.where(out_mass > 0, out_mass * np.log(out_mass), 0.0).sum()
    entropy = float(-h / n)

    diag = CpdDiagnostics(
        iterations=it,
        sigma2=float(sigma2),
        loglik_trace=loglik_trace,
        monotone=monotone,
        correspondence_entropy=entropy,
        converged=converged or it < cfg.max_iterations,
    )
    return RigidTransform3D(nearest_rotation(r), t), diag
