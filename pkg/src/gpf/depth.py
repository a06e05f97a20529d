"""Visible depth maps from point density, and per-point visibility scores."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .core import CameraView, NeuralPointField, SceneBounds, bilinear_sample
from .spatial import SpatialIndex

# Canonical length unit as a fraction of scene_scale: the absorption term
# 2*d*r is evaluated with r expressed in units of scene_scale/500, which is
# roughly the millimetre scale the published constants were tuned for.
CANONICAL_UNITS_PER_SCENE = 500.0


@dataclass(frozen=True)
class DepthEstimationConfig:
    """Settings for density-based depth estimation and view selection.

    ``None`` for a length means "derive from scene_scale"; call
    :meth:`resolved` to get concrete values for a given scene.
    """

    samples_per_ray: int = 128
    search_radius: Optional[float] = None
    search_radius_frac: float = 0.005
    bandwidth: Optional[float] = None
    top_k_views: Optional[int] = 3
    length_unit: Optional[float] = None

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if self.search_radius is not None and self.search_radius <= 0:
            raise ValueError("search_radius must be positive")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.top_k_views is not None and self.top_k_views < 1:
            raise ValueError("top_k_views must be >= 1")

    def resolved(self, scene_scale: float) -> "DepthEstimationConfig":
        r = self.search_radius if self.search_radius is not None else self.search_radius_frac * scene_scale
        return replace(
            self,
            search_radius=r,
            bandwidth=self.bandwidth if self.bandwidth is not None else r,
            length_unit=self.length_unit if self.length_unit is not None else scene_scale / CANONICAL_UNITS_PER_SCENE,
        )


@dataclass(frozen=True)
class VisibilityTable:
    scores: np.ndarray

    def top_k(self, k: Optional[int]) -> np.ndarray:
        """Per-point view indices of the k best scores (ties: lower view index)."""
        n_views = self.scores.shape[1]
        k = n_views if k is None else min(k, n_views)
        order = np.argsort(-self.scores, axis=1, kind="stable")
        return order[:, :k]


def point_density(q, neighbors, bandwidth: float) -> float:
    """Mean Gaussian kernel value over ``neighbors`` (list of (point, distance)).

    Raises:
        ValueError: for an empty neighbor list; callers filter those first.
    """
    if len(neighbors) == 0:
        raise ValueError("point_density needs at least one neighbor")
    q = np.asarray(q, dtype=np.float64)
    sq = np.array([np.sum((np.asarray(p, dtype=np.float64) - q) ** 2) for p, _ in neighbors])
    return float(np.mean(np.exp(-0.5 * sq / bandwidth**2)))


def ray_transmittance(densities, r: float) -> np.ndarray:
    """Exclusive-prefix transmittance ``T_n = exp(-sum_{i<n} 2 d_i r)``."""
    d = np.asarray(densities, dtype=np.float64)
    if d.size and (not np.isfinite(d).all() or d.min() < 0):
        raise ValueError("densities must be finite and non-negative")
    tau = np.concatenate([[0.0], np.cumsum(2.0 * d * r)[:-1]]) if d.size else d
    return np.exp(-tau)


def densities_along(index: SpatialIndex, pts: np.ndarray, radius: float, bandwidth: float) -> np.ndarray:
    """Density of each query point (0 where it has no neighbor within radius)."""
    qid, _, dist = index.query_radius(pts, radius)
    n = len(pts)
    cnt = np.bincount(qid, minlength=n)
    s = np.bincount(qid, weights=np.exp(-0.5 * (dist / bandwidth) ** 2), minlength=n)
    return np.where(cnt > 0, s / np.maximum(cnt, 1), 0.0)


def soft_depth(t: np.ndarray, dens: np.ndarray, cos_axis: np.ndarray, r_units: float) -> np.ndarray:
    """Soft-argmax camera depth for rays sampled at ``t`` (R, S) with densities (R, S)."""
    tau = np.cumsum(2.0 * dens * r_units, axis=1) - 2.0 * dens * r_units
    w = np.exp(-tau) * dens
    wsum = w.sum(axis=1)
    z = t * cos_axis[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        D = (w * z).sum(axis=1) / wsum
    return np.where(wsum > 0, D, 0.0)


def estimate_depth_map(
    field: NeuralPointField,
    index: SpatialIndex,
    view: CameraView,
    cfg: DepthEstimationConfig = DepthEstimationConfig(),
    samples_per_ray: Optional[int] = None,
    chunk_rays: int = 1024,
) -> np.ndarray:
    """Visible depth map (H, W); 0 marks pixels with no surviving samples."""
    index.check(field)
    cfg = cfg.resolved(field.scene_scale)
    n_s = samples_per_ray or cfg.samples_per_ray
    r = cfg.search_radius
    bounds = SceneBounds.from_points(field.positions, pad=r)
    pix = view.pixel_centers()
    dirs = view.ray_directions(pix)
    origin = view.center
    near, far, hit = bounds.intersect(np.broadcast_to(origin, dirs.shape), dirs)
    cos_axis = dirs @ view.axis
    depth = np.zeros(len(pix))
    frac = (np.arange(n_s) + 0.5) / n_s
    r_units = r / cfg.length_unit
    rays = np.flatnonzero(hit)
    for s in range(0, len(rays), chunk_rays):
        ids = rays[s : s + chunk_rays]
        t = near[ids, None] + frac[None] * (far[ids] - near[ids])[:, None]
        pts = origin + t[..., None] * dirs[ids, None, :]
        dens = densities_along(index, pts.reshape(-1, 3), r, cfg.bandwidth).reshape(t.shape)
        depth[ids] = soft_depth(t, dens, cos_axis[ids], r_units)
    return depth.reshape(view.height, view.width)


def visibility_scores(points: np.ndarray, view: CameraView) -> np.ndarray:
    """Vectorized visibility score of many points against one view."""
    if view.depth_map is None:
        raise ValueError("view has no depth map")
    pix, z = view.project(points)
    front = z > 0
    D = np.zeros(len(z))
    D[front] = bilinear_sample(view.depth_map, pix[front])
    ok = front & (D > 0)
    score = np.zeros(len(z))
    score[ok] = 1.0 - np.abs(z[ok] - D[ok]) / z[ok]
    return np.clip(score, 0.0, 1.0)


def visibility_score(p, view: CameraView) -> float:
    return float(visibility_scores(np.asarray(p, dtype=np.float64)[None], view)[0])


def build_visibility_table(field: NeuralPointField, views: Sequence[CameraView]) -> VisibilityTable:
    scores = np.stack([visibility_scores(field.positions, v) for v in views], axis=1)
    return VisibilityTable(scores)
