"""Volume rendering of point-field samples, batched ray pipeline and loss."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .core import FEATURE_DIM, CameraView, NeuralPointField, SceneBounds
from .depth import DepthEstimationConfig, estimate_depth_map
from .features import FetchAggregatorParams, FetchInputs, fetch_backward, fetch_forward
from .kernel import KernelConfig, KernelParameters, kernel_backward, kernel_forward
from .sampling import LogSamplingConfig, sample_batch
from .spatial import NeighborBatch, SpatialIndex, build_index


@dataclass
class RaySampleBatch:
    """Samples of one ray. ``deltas`` are step lengths in scene units."""

    depths: np.ndarray
    deltas: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    survived: np.ndarray
    neighbor_sets: Optional[list] = None

    def __post_init__(self):
        if np.any(np.asarray(self.deltas) < 0):
            raise ValueError("deltas must be non-negative")


def sample_deltas(t: np.ndarray, far) -> np.ndarray:
    """Depth differences along the last axis; the last step runs to ``far``."""
    t = np.asarray(t, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    return np.concatenate([np.diff(t, axis=-1), far[..., None] - t[..., -1:]], axis=-1)


def composite(sigma, color, t, deltas):
    """Batched compositing over (R, S) samples.

    Returns ``(rgb (R,3), depth (R,), acc (R,), cache)``; the background is
    black, so ``rgb`` is not normalized by ``acc``.
    """
    a = sigma * deltas
    # exclusive prefix sum by shifting; cumsum(a) - a gives inf - inf for opaque samples
    tau = np.zeros_like(a)
    np.cumsum(a[:, :-1], axis=1, out=tau[:, 1:])
    T = np.exp(-tau)
    alpha = -np.expm1(-a)
    w = T * alpha
    rgb = np.einsum("rs,rsc->rc", w, color)
    # the weights telescope to 1 - T_end; summing them can overshoot 1 by an ulp
    acc = -np.expm1(-(tau[:, -1] + a[:, -1]))
    depth = (w * t).sum(axis=1) / np.maximum(w.sum(axis=1), 1e-8)
    return rgb, depth, acc, dict(a=a, T=T, w=w, color=color, deltas=deltas)


def composite_backward(cache: dict, drgb: np.ndarray):
    """Gradients of a loss on ``rgb`` w.r.t. per-sample sigma and color."""
    w, T, a, color = cache["w"], cache["T"], cache["a"], cache["color"]
    dcolor = w[..., None] * drgb[:, None, :]
    dw = np.einsum("rc,rsc->rs", drgb, color)
    wdw = w * dw
    after = wdw[:, ::-1].cumsum(axis=1)[:, ::-1] - wdw
    da = dw * T * np.exp(-a) - after
    return da * cache["deltas"], dcolor


def render_ray(batch: RaySampleBatch):
    """(color, depth, acc) of one ray; filtered samples contribute nothing."""
    sigma = np.where(batch.survived, batch.sigma, 0.0)
    rgb, depth, acc, _ = composite(
        sigma[None], np.asarray(batch.color, dtype=np.float64)[None], np.asarray(batch.depths)[None],
        np.asarray(batch.deltas, dtype=np.float64)[None],
    )
    return rgb[0], float(depth[0]), float(acc[0])


def mse_loss(pred, gt):
    """Mean over rays and color channels, with its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class Model:
    """Kernel/decoder parameters plus, in fetch mode, the feature aggregators."""

    kernel: KernelParameters
    fetch: Optional[FetchAggregatorParams] = None

    @classmethod
    def init(cls, seed: int = 0, aggregator: str = "learned", fetch: bool = False) -> "Model":
        return cls(KernelParameters.init(seed, aggregator), FetchAggregatorParams.init(seed + 1) if fetch else None)

    @property
    def aggregator(self) -> str:
        return self.kernel.aggregator

    def weights(self) -> dict:
        w = dict(self.kernel.weights)
        if self.fetch is not None:
            w.update(self.fetch.weights)
        return w

    def with_weights(self, w: dict) -> "Model":
        kw = {k: w[k] for k in self.kernel.weights}
        fw = {k: w[k] for k in self.fetch.weights} if self.fetch is not None else None
        return Model(KernelParameters(kw, self.aggregator), FetchAggregatorParams(fw) if fw is not None else None)


@dataclass
class Scene:
    """A point field with its views, resolved configs and spatial index."""

    field: NeuralPointField
    views: list
    kernel_cfg: KernelConfig
    log_cfg: LogSamplingConfig
    depth_cfg: DepthEstimationConfig
    index: SpatialIndex
    bounds: SceneBounds
    fetch_inputs: Optional[FetchInputs] = None
    _frames: tuple = dc_field(default=None, repr=False)

    @classmethod
    def build(cls, field: NeuralPointField, views: Sequence[CameraView], kernel_cfg=KernelConfig(),
              log_cfg=LogSamplingConfig(), depth_cfg=DepthEstimationConfig(), fetch_inputs=None) -> "Scene":
        s = field.scene_scale
        kc, lc, dcfg = kernel_cfg.resolved(s), log_cfg.resolved(s), depth_cfg.resolved(s)
        index = build_index(field, kc.search_radius)
        bounds = SceneBounds.from_points(field.positions, pad=max(kc.search_radius, dcfg.search_radius))
        return cls(field, list(views), kc, lc, dcfg, index, bounds, fetch_inputs)

    def with_field(self, field: NeuralPointField, fetch_inputs=None) -> "Scene":
        """Same configs and views around a new field (index and bounds rebuilt)."""
        index = build_index(field, self.kernel_cfg.search_radius)
        bounds = SceneBounds.from_points(field.positions, pad=max(self.kernel_cfg.search_radius, self.depth_cfg.search_radius))
        return Scene(field, self.views, self.kernel_cfg, self.log_cfg, self.depth_cfg, index, bounds, fetch_inputs)

    def with_views(self, views) -> "Scene":
        return Scene(self.field, list(views), self.kernel_cfg, self.log_cfg, self.depth_cfg, self.index, self.bounds,
                     self.fetch_inputs)

    def frames(self):
        if self._frames is None or len(self._frames[0]) != len(self.views):
            R = np.stack([v.rotation for v in self.views])
            t = np.stack([v.translation for v in self.views])
            self._frames = (R, t)
        return self._frames

    def depth_map(self, view: CameraView) -> np.ndarray:
        if view.depth_map is not None:
            return view.depth_map
        return estimate_depth_map(self.field, self.index, view, self.depth_cfg)


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    hit: np.ndarray
    view_ids: np.ndarray
    centers: np.ndarray

    def __len__(self):
        return len(self.near)

    def take(self, ids) -> "RayBatch":
        return RayBatch(*(getattr(self, f)[ids] for f in
                          ("origins", "dirs", "near", "far", "hit", "view_ids", "centers")))

    @staticmethod
    def concat(batches) -> "RayBatch":
        return RayBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in
                          ("origins", "dirs", "near", "far", "hit", "view_ids", "centers")))


def view_rays(scene: Scene, view: CameraView, view_id: int, depth_map=None, pixel_ids=None) -> RayBatch:
    """Rays through pixel centers (all, or the flat ``pixel_ids``) of ``view``.

    Log-sampling centers come from ``depth_map`` (camera z; 0 = unknown),
    converted to a distance along each ray.
    """
    pix = view.pixel_centers()
    if pixel_ids is not None:
        pix = pix[pixel_ids]
    dirs = view.ray_directions(pix)
    origins = np.broadcast_to(view.center, dirs.shape).copy()
    near, far, hit = scene.bounds.intersect(origins, dirs)
    centers = np.full(len(dirs), np.nan)
    if depth_map is not None:
        D = np.asarray(depth_map).ravel()
        D = D if pixel_ids is None else D[pixel_ids]
        cos = dirs @ view.axis
        known = (D > 0) & (cos > 0)
        centers[known] = D[known] / cos[known]
    return RayBatch(origins, dirs, near, far, hit, np.full(len(dirs), view_id), centers)


@dataclass
class Traced:
    """Sample depths for a ray batch and the k-NN sets of surviving samples."""

    t: np.ndarray
    valid: np.ndarray
    deltas: np.ndarray
    sid: np.ndarray
    query: np.ndarray
    nbrs: NeighborBatch

    @property
    def survived(self) -> np.ndarray:
        s = np.zeros(self.t.size, dtype=bool)
        s[self.sid] = True
        return s.reshape(self.t.shape)


def trace(scene: Scene, rays: RayBatch, sampler: str, rng=None, perturb: bool = False, jitter_uniform: bool = False) -> Traced:
    """Place samples and look up neighbors. Without ``perturb`` log sampling is noise-free."""
    lc = scene.log_cfg if perturb else scene.log_cfg.noise_free()
    ss = sample_batch(sampler, rays.near, rays.far, rays.centers, lc, rng=rng, jitter_uniform=jitter_uniform)
    valid = ss.valid & rays.hit[:, None]
    deltas = np.where(valid, sample_deltas(ss.t, rays.far), 0.0)
    flat = np.flatnonzero(valid)
    r_id, s_id = np.divmod(flat, ss.t.shape[1])
    pts = rays.origins[r_id] + ss.t[r_id, s_id, None] * rays.dirs[r_id]
    kc = scene.kernel_cfg
    nb = scene.index.knn(pts, kc.k, kc.search_radius)
    keep = nb.idx[:, 0] >= 0
    return Traced(ss.t, valid, deltas, flat[keep], pts[keep], NeighborBatch(nb.idx[keep], nb.dist[keep]))


def render_forward(scene: Scene, model: Model, rays: RayBatch, traced: Traced, features=None, weights=None,
                   positions=None):
    """Evaluate the kernel on surviving samples and composite.

    ``features`` optionally overrides the per-point feature table (N, 43);
    otherwise features come from fetching (fetch mode) or from the field.
    ``positions`` likewise overrides point positions inside the kernel
    (neighbor sets still come from the scene index).
    Returns ``(rgb, depth, acc, cache)``.
    """
    w = model.weights() if weights is None else weights
    R, S = traced.t.shape
    M = len(traced.sid)
    sigma = np.zeros((R, S))
    color = np.zeros((R, S, 3))
    cache = dict(M=M)
    if M:
        idx, mask = traced.nbrs.idx, traced.nbrs.mask
        u, inv = np.unique(idx[mask], return_inverse=True)
        fetch_cache = None
        if features is not None:
            fu = features[u]
        elif scene.fetch_inputs is not None and model.fetch is not None:
            fu, fetch_cache = fetch_forward(w, scene.fetch_inputs.take(u))
        else:
            fu = scene.field.features[u]
        feats = np.zeros(mask.shape + (FEATURE_DIM,))
        feats[mask] = fu[inv]
        P = scene.field.positions if positions is None else positions
        pos = np.where(mask[..., None], P[np.maximum(idx, 0)], traced.query[:, None, :])
        Rv, tv = scene.frames()
        vid = rays.view_ids[traced.sid // S]
        sig, col, kcache = kernel_forward(w, model.aggregator, traced.query, pos, feats, mask, Rv[vid], tv[vid],
                                          scene.kernel_cfg)
        sigma.flat[traced.sid] = sig / scene.kernel_cfg.density_unit
        color.reshape(-1, 3)[traced.sid] = col
        cache.update(u=u, inv=inv, kcache=kcache, fetch_cache=fetch_cache, weights=w)
    rgb, depth, acc, ccache = composite(sigma, color, traced.t, traced.deltas)
    cache.update(ccache=ccache, sigma=sigma)
    return rgb, depth, acc, cache


def render_backward(scene: Scene, model: Model, traced: Traced, cache: dict, drgb, grads: dict,
                    need_features: bool = False, need_positions: bool = False):
    """Accumulate parameter gradients into ``grads``.

    Returns ``(point_ids, dfeatures (U,43) or None, dpositions (U,3) or None)``
    for the points touched by this batch.
    """
    if cache["M"] == 0:
        return np.zeros(0, dtype=np.int64), None, None
    dsig, dcol = composite_backward(cache["ccache"], drgb)
    sid = traced.sid
    w = cache["weights"]
    dfe, dpo = kernel_backward(
        w, model.aggregator, cache["kcache"], dsig.flat[sid] / scene.kernel_cfg.density_unit,
        dcol.reshape(-1, 3)[sid], grads, need_positions=need_positions,
    )
    mask = traced.nbrs.mask
    u, inv = cache["u"], cache["inv"]
    E = len(inv)
    scatter = sparse.csr_matrix((np.ones(E, dtype=dfe.dtype), (inv, np.arange(E))), shape=(len(u), E))
    dfu = None
    if need_features or cache["fetch_cache"] is not None:
        dfu = scatter @ dfe[mask]
        if cache["fetch_cache"] is not None:
            fetch_backward(w, cache["fetch_cache"], dfu, grads)
    dpu = scatter @ dpo[mask] if need_positions else None
    return u, (dfu if need_features else None), dpu


def render_rays(scene: Scene, model: Model, rays: RayBatch, sampler: str = "log16", rng=None, perturb=False,
                chunk: int = 4096, features=None):
    rgb, depth, acc = [], [], []
    for s in range(0, len(rays), chunk):
        sub = rays.take(slice(s, s + chunk))
        tr = trace(scene, sub, sampler, rng=rng, perturb=perturb)
        c, d, a, _ = render_forward(scene, model, sub, tr, features=features)
        rgb.append(c)
        depth.append(d)
        acc.append(a)
    return np.concatenate(rgb), np.concatenate(depth), np.concatenate(acc)


def render_image(scene: Scene, model: Model, view: CameraView, sampler: str = "log16", seed: Optional[int] = None,
                 chunk: int = 4096, view_id: Optional[int] = None, return_depth: bool = False):
    """Render ``view`` (H, W, 3).

    ``seed=None`` gives noise-free sampling; an integer seed enables the
    training-time log perturbations, reproducibly. ``view_id`` indexes
    ``scene.views`` when the view is one of them; otherwise it is rendered
    in its own frame.
    """
    if view_id is None:
        scene = scene.with_views([view])
        view_id = 0
    depth_map = scene.depth_map(view) if sampler in ("log16", "surf2") else None
    rays = view_rays(scene, view, view_id, depth_map)
    rng = np.random.default_rng(seed) if seed is not None else None
    rgb, depth, _ = render_rays(scene, model, rays, sampler, rng=rng, perturb=seed is not None, chunk=chunk)
    img = np.clip(rgb, 0.0, 1.0).reshape(view.height, view.width, 3)
    return (img, depth.reshape(view.height, view.width)) if return_depth else img
