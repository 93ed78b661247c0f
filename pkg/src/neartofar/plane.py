"""Robust ground-plane estimation (RANSAC + least-squares refinement)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, InvalidInputError, NoGroundPlaneError


@dataclass(frozen=True)
class Plane:
    """Plane ``normal . x + offset = 0`` with unit ``normal``."""

    normal: tuple
    offset: float
    inlier_count: int = 0
    inlier_rms: float = 0.0

    @property
    def n(self) -> np.ndarray:
        return np.array(self.normal)

    def to_dict(self) -> dict:
        return dict(normal=list(self.normal), offset=self.offset,
                    inlier_count=self.inlier_count, inlier_rms=self.inlier_rms)


@dataclass
class RansacConfig:
    iterations: int = 200
    inlier_tau: float = 0.05
    min_inliers: int = 500
    normal_cone_deg: float = 30.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if not self.inlier_tau > 0:
            raise InvalidInputError("inlier_tau must be positive")
        if not 0 < self.normal_cone_deg <= 90:
            raise InvalidInputError("normal_cone_deg must be in (0, 90]")


def signed_height(plane: Plane, p) -> np.ndarray | float:
    """Distance above the plane (positive on the side the normal points to)."""
    p = np.asarray(p, dtype=np.float64)
    h = p @ plane.n + plane.offset
    return float(h) if np.ndim(h) == 0 else h


def _orient(normal: np.ndarray, up_hint) -> np.ndarray:
    if up_hint is None:
        # canonical sign when no hint: largest-magnitude component positive
        return normal if normal[np.argmax(np.abs(normal))] > 0 else -normal
    return normal if normal @ np.asarray(up_hint, dtype=np.float64) > 0 else -normal


def refine_plane_lsq(points, up_hint=None) -> Plane:
    """Total least-squares plane through ``points``.

    The normal is the eigenvector of the centred scatter matrix with the
    smallest eigenvalue. Raises DegenerateGeometryError when the points do
    not span a plane.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise DegenerateGeometryError(f"need at least 3 points, got {len(pts)}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    evals, evecs = np.linalg.eigh(centered.T @ centered)
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise DegenerateGeometryError("points are collinear or coincident")
    normal = _orient(evecs[:, 0], up_hint)
    offset = -float(normal @ centroid)
    resid = centered @ normal
    return Plane(tuple(float(c) for c in normal), offset, len(pts), float(np.sqrt(np.mean(resid**2))))


def _hypotheses(pts: np.ndarray, cfg: RansacConfig):
    rng = np.random.default_rng(cfg.rng_seed)
    m = len(pts)
    for _ in range(cfg.iterations):
        yield rng.choice(m, size=3, replace=False)


def fit_plane_ransac(cloud, up_hint, cfg: RansacConfig | None = None) -> Plane:
    """Best-consensus plane whose normal lies within the cone around ``up_hint``.

    ``cloud`` may be a PointCloud or an (M, 3) array. Hypotheses are exact
    planes through 3 sampled points; ties in consensus go to the earliest
    hypothesis. The winner is refined by least squares on its inliers and the
    returned inlier statistics are those of the refined plane.
    """
    cfg = cfg or RansacConfig()
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)
    up = np.asarray(up_hint, dtype=np.float64)
    up = up / np.linalg.norm(up)
    if len(pts) < 3:
        raise NoGroundPlaneError(f"only {len(pts)} points")
    cos_cone = np.cos(np.deg2rad(cfg.normal_cone_deg))

    best_count, best_plane = 0, None
    for idx in _hypotheses(pts, cfg):
        p0, p1, p2 = pts[idx]
        a, b = p1 - p0, p2 - p0
        n = np.cross(a, b)
        norm = np.linalg.norm(n)
        if norm <= 1e-10 * np.linalg.norm(a) * np.linalg.norm(b) or norm == 0:
            continue
        n = n / norm
        if n @ up < 0:
            n = -n
        if n @ up < cos_cone:
            continue
        d = -n @ p0
        count = int(np.count_nonzero(np.abs(pts @ n + d) <= cfg.inlier_tau))
        if count > best_count:
            best_count, best_plane = count, (n, d)

    if best_plane is None or best_count < cfg.min_inliers:
        raise NoGroundPlaneError(f"best consensus {best_count} < min_inliers {cfg.min_inliers}")

    n, d = best_plane
    inliers = pts[np.abs(pts @ n + d) <= cfg.inlier_tau]
    try:
        refined = refine_plane_lsq(inliers, up)
    except DegenerateGeometryError as exc:
        raise NoGroundPlaneError(f"inlier set degenerate: {exc}") from exc
    resid = pts @ refined.n + refined.offset
    mask = np.abs(resid) <= cfg.inlier_tau
    count = int(np.count_nonzero(mask))
    rms = float(np.sqrt(np.mean(resid[mask] ** 2))) if count else 0.0
    return Plane(refined.normal, refined.offset, count, rms)
