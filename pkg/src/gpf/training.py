"""Training of the aggregators, kernel and decoders, and the three-stage finetuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import COLOR_DIM, CameraView, NeuralPointField
from .depth import build_visibility_table, estimate_depth_map
from .features import fetch_forward, gather_fetch_inputs
from .render import (
    Model, RayBatch, Scene, mse_loss, render_backward, render_forward, render_rays, trace, view_rays,
)
from .sampling import sample_batch
from .spatial import NeighborBatch

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """Loss or gradients became non-finite; ``batch`` holds the offending ray ids."""

    def __init__(self, message, iteration=None, batch=None):
        super().__init__(message)
        self.iteration = iteration
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    lr_params: float = 5e-4
    lr_features: float = 1e-5
    lr_point_colors: float = 1e-7
    anneal: float = 0.1
    batch_rays: int = 512
    iters: int = 0
    seed: int = 0
    optimizer: str = "adam"
    sampler: str = "log16"
    train_params: bool = True
    train_features: bool = False
    perturb: bool = True
    precision: str = "float32"

    def __post_init__(self):
        if min(self.lr_params, self.lr_features, self.lr_point_colors) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError("optimizer must be 'adam' or 'gd'")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")


@dataclass(frozen=True)
class FinetuneConfig:
    t_opacity: float = 0.5
    t_dist: Optional[float] = None
    grow_batch: int = 4096
    grow_samples: int = 128
    prune_batch: int = 3192
    radius_scale: float = 1.75
    refine_offset_weight: float = 1.0
    refine_iters: int = 200
    lr_offsets: float = 2e-2
    stage1_iters: int = 500
    stage2_passes: int = 1
    max_cycles: int = 10
    min_improvement: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.t_opacity < 1:
            raise ValueError("t_opacity must be in (0, 1)")
        if self.t_dist is not None and self.t_dist <= 0:
            raise ValueError("t_dist must be positive")
        if not 1.5 <= self.radius_scale <= 2.0:
            raise ValueError("radius_scale must be in [1.5, 2.0]")
        if self.refine_offset_weight < 0:
            raise ValueError("refine_offset_weight must be >= 0")
        if self.prune_batch < 1 or self.grow_batch < 1:
            raise ValueError("batch sizes must be >= 1")


def cosine_lr(base: float, it: int, total: int, anneal: float = 0.1) -> float:
    """Cosine decay from ``base`` to ``anneal * base`` over ``total`` steps."""
    if total <= 1:
        return base
    return base * (anneal + (1 - anneal) * 0.5 * (1 + math.cos(math.pi * it / (total - 1))))


class Adam:
    def __init__(self, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lrs) -> None:
        """In-place update; ``lrs`` maps name -> scalar or broadcastable array."""
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - lrs[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)


class GradientDescent:
    def step(self, params: dict, grads: dict, lrs) -> None:
        for k, g in grads.items():
            params[k] = params[k] - lrs[k] * g


def make_optimizer(name: str):
    return Adam() if name == "adam" else GradientDescent()


@dataclass
class RayPool:
    """All training rays of a scene with their ground-truth colors."""

    rays: RayBatch
    colors: np.ndarray

    @classmethod
    def from_scene(cls, scene: Scene, views: Optional[Sequence[CameraView]] = None, only_hits: bool = True) -> "RayPool":
        views = scene.views if views is None else views
        batches, cols = [], []
        for i, v in enumerate(views):
            if v.image is None:
                raise ValueError(f"view {i} has no image")
            rb = view_rays(scene, v, i, v.depth_map)
            batches.append(rb)
            cols.append(v.image.reshape(-1, 3))
        rays = RayBatch.concat(batches)
        colors = np.concatenate(cols)
        if only_hits:
            keep = np.flatnonzero(rays.hit)
            rays, colors = rays.take(keep), colors[keep]
        return cls(rays, colors)

    def __len__(self):
        return len(self.colors)


@dataclass
class TrainResult:
    model: Model
    scene: Scene
    history: List[float] = dc_field(default_factory=list)


def _feature_lrs(lr_f, lr_c):
    lrs = np.full(43, lr_f)
    lrs[:COLOR_DIM] = lr_c
    return lrs


def batch_loss_and_grads(scene: Scene, model: Model, weights: dict, rays: RayBatch, gt: np.ndarray, sampler: str,
                         rng=None, perturb=False, features=None, positions=None, need_features=False,
                         need_positions=False, need_params=True):
    """One forward/backward pass over a ray batch.

    Returns ``(loss, grads, point_ids, dfeatures, dpositions)``.
    """
    tr = trace(scene, rays, sampler, rng=rng, perturb=perturb)
    rgb, _, _, cache = render_forward(scene, model, rays, tr, features=features, weights=weights, positions=positions)
    loss, drgb = mse_loss(rgb, gt)
    grads: dict = {}
    ids, dfu, dpu = render_backward(scene, model, tr, cache, drgb, grads, need_features, need_positions)
    if not need_params:
        grads = {}
    return loss, grads, ids, dfu, dpu


def train(scene: Scene, model: Model, cfg: TrainConfig, pool: Optional[RayPool] = None,
          callback: Optional[Callable] = None) -> TrainResult:
    """Optimize model weights (and, with ``train_features``, the per-point features).

    Feature training happens in field mode: the scene's own feature table is
    optimized and returned in ``TrainResult.scene``.
    """
    pool = pool or RayPool.from_scene(scene)
    rng = np.random.default_rng(cfg.seed)
    weights = {k: np.array(v, dtype=np.float64) for k, v in model.weights().items()}
    opt = make_optimizer(cfg.optimizer)
    f_opt = make_optimizer(cfg.optimizer)
    feats = np.array(scene.field.features) if cfg.train_features else None
    f_lrs = _feature_lrs(cfg.lr_features, cfg.lr_point_colors)
    history: List[float] = []
    n = len(pool)
    for it in range(cfg.iters):
        ids = rng.choice(n, size=min(cfg.batch_rays, n), replace=False)
        wc = {k: v.astype(cfg.precision) for k, v in weights.items()}
        loss, grads, pids, dfu, _ = batch_loss_and_grads(
            scene, model, wc, pool.rays.take(ids), pool.colors[ids], cfg.sampler, rng=rng, perturb=cfg.perturb,
            features=feats, need_features=cfg.train_features,
        )
        if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"non-finite loss/gradient at iteration {it}", it, ids)
        history.append(loss)
        scale = cosine_lr(1.0, it, cfg.iters, cfg.anneal)
        if cfg.train_params:
            opt.step(weights, grads, {k: cfg.lr_params * scale for k in grads})
        if cfg.train_features and dfu is not None:
            g = np.zeros_like(feats)
            g[pids] = dfu
            box = {"f": feats}
            f_opt.step(box, {"f": g}, {"f": f_lrs * scale})
            feats = box["f"]
            feats[:, :COLOR_DIM] = np.clip(feats[:, :COLOR_DIM], 0.0, 1.0)
        if callback is not None:
            callback(it, loss)
    new_model = model.with_weights(weights)
    new_scene = scene
    if cfg.train_features and cfg.iters > 0:
        new_scene = _replace_field(scene, scene.field.with_features(feats))
    return TrainResult(new_model, new_scene, history)


def _replace_field(scene: Scene, field: NeuralPointField) -> Scene:
    return scene.with_field(field, fetch_inputs=None)


def bake_features(scene: Scene, model: Model) -> Scene:
    """Freeze fetched features into the field (the starting point of finetuning)."""
    if scene.fetch_inputs is None or model.fetch is None:
        return scene
    feats, _ = fetch_forward(model.fetch.weights, scene.fetch_inputs)
    return _replace_field(scene, scene.field.with_features(feats))


def prepare_views(field: NeuralPointField, views: Sequence[CameraView], scene: Scene, pyramids: bool = True):
    """Views with estimated depth maps (and feature pyramids) for ``field``."""
    from .features import extract_feature_pyramid

    out = []
    for v in views:
        D = estimate_depth_map(field, scene.index, v, scene.depth_cfg)
        pyr = extract_feature_pyramid(v.image) if (pyramids and v.image is not None and v.pyramid is None) else v.pyramid
        out.append(v.replace(depth_map=D, pyramid=pyr))
    return out


def build_scene(field: NeuralPointField, views: Sequence[CameraView], kernel_cfg=None, log_cfg=None, depth_cfg=None,
                fetch: bool = True, top_k: Optional[int] = None) -> Scene:
    """Full preprocessing: index, depth maps, pyramids, visibility and fetch inputs."""
    from .depth import DepthEstimationConfig
    from .kernel import KernelConfig
    from .sampling import LogSamplingConfig

    scene = Scene.build(field, views, kernel_cfg or KernelConfig(), log_cfg or LogSamplingConfig(),
                        depth_cfg or DepthEstimationConfig())
    views = prepare_views(field, views, scene, pyramids=fetch)
    scene = scene.with_views(views)
    if fetch:
        table = build_visibility_table(field, views)
        k = scene.depth_cfg.top_k_views if top_k is None else top_k
        scene.fetch_inputs = gather_fetch_inputs(field, views, table, k)
    return scene


def refresh_depth_maps(scene: Scene) -> Scene:
    views = [v.replace(depth_map=estimate_depth_map(scene.field, scene.index, v, scene.depth_cfg)) for v in scene.views]
    return scene.with_views(views)


# Stage 2: growing and pruning ----------------------------------------------


def _kernel_alpha(scene: Scene, model: Model, query: np.ndarray, nb: NeighborBatch, rot, trans, delta):
    """Opacity ``1 - exp(-sigma * delta)`` at query points with given neighbor sets."""
    from .kernel import kernel_forward

    alpha = np.zeros(len(query))
    ok = nb.idx[:, 0] >= 0
    if not ok.any():
        return alpha
    idx, mask = nb.idx[ok], nb.mask[ok]
    P = scene.field.positions
    pos = np.where(mask[..., None], P[np.maximum(idx, 0)], query[ok][:, None, :])
    feats = np.where(mask[..., None], scene.field.features[np.maximum(idx, 0)], 0.0)
    sig, _, _ = kernel_forward(model.kernel.weights, model.aggregator, query[ok], pos, feats, mask, rot[ok], trans[ok],
                               scene.kernel_cfg)
    d = delta[ok] if np.ndim(delta) else delta
    alpha[ok] = -np.expm1(-(sig / scene.kernel_cfg.density_unit) * d)
    return alpha


def _greedy_spacing(points: np.ndarray, order: np.ndarray, min_dist: float) -> np.ndarray:
    """Indices (in ``order`` priority) of points kept so that pairs are >= min_dist apart."""
    kept: List[int] = []
    for i in order:
        if kept and np.min(np.linalg.norm(points[kept] - points[i], axis=1)) < min_dist:
            continue
        kept.append(int(i))
    return np.asarray(kept, dtype=np.int64)


def grow_points(scene: Scene, model: Model, cfg: FinetuneConfig, rng=None, return_info: bool = False):
    """Add points where rendered opacity is high but no point is nearby.

    Random training rays are sampled uniformly; on each ray the sample with
    the highest opacity (kernel evaluated over an enlarged radius) becomes a
    candidate when its opacity exceeds ``t_opacity`` and its nearest point
    is at least ``t_dist`` away. New points take neighbor-averaged features.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    kc = scene.kernel_cfg
    t_dist = cfg.t_dist if cfg.t_dist is not None else kc.search_radius
    big_r = cfg.radius_scale * kc.search_radius
    pool = RayPool.from_scene(scene)
    ids = rng.choice(len(pool), size=min(cfg.grow_batch, len(pool)), replace=False)
    rays = pool.rays.take(ids)
    ss = sample_batch(f"uni{cfg.grow_samples}", rays.near, rays.far, rays.centers, scene.log_cfg)
    R, S = ss.t.shape
    pts = rays.origins[:, None, :] + ss.t[..., None] * rays.dirs[:, None, :]
    delta = np.full((R, S), (rays.far - rays.near)[:, None] / S)
    Rv, tv = scene.frames()
    vid = np.repeat(rays.view_ids, S)
    flat = pts.reshape(-1, 3)
    nb = scene.index.knn(flat, kc.k, big_r)
    alpha = _kernel_alpha(scene, model, flat, nb, Rv[vid], tv[vid], delta.ravel()).reshape(R, S)
    best = np.argmax(alpha, axis=1)
    a_best = alpha[np.arange(R), best]
    cand = pts[np.arange(R), best]
    cand_nb = NeighborBatch(nb.idx.reshape(R, S, -1)[np.arange(R), best], nb.dist.reshape(R, S, -1)[np.arange(R), best])
    d_min = cand_nb.dist[:, 0]
    ok = (a_best > cfg.t_opacity) & (d_min >= t_dist) & np.isfinite(d_min)
    sel = np.flatnonzero(ok)
    kept = sel[_greedy_spacing(cand[sel], np.argsort(-a_best[sel], kind="stable"), t_dist)] if len(sel) else sel
    info = dict(candidates=int(ok.sum()), added=len(kept))
    if len(kept) == 0:
        return (scene, info) if return_info else scene
    nidx, nmask = cand_nb.idx[kept], cand_nb.mask[kept]
    F = scene.field.features[np.maximum(nidx, 0)] * nmask[..., None]
    avg = F.sum(axis=1) / nmask.sum(axis=1, keepdims=True)
    field = scene.field.concat(cand[kept], np.clip(avg[:, :3], 0, 1), avg[:, 3:11], avg[:, 11:])
    new = _replace_field(scene, field)
    return (new, info) if return_info else new


def prune_points(scene: Scene, model: Model, cfg: FinetuneConfig, rng=None, return_info: bool = False):
    """Delete points whose opacity, recomputed at their own position, is at most ``t_opacity``.

    A random batch of ``prune_batch`` points is tested; each point is
    excluded from its own neighbor set. The opacity uses the smallest
    log-sampling step as the step length and the frame of the first view.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    N = len(scene.field)
    n = min(cfg.prune_batch, N)
    ids = np.sort(rng.choice(N, size=n, replace=False))
    kc = scene.kernel_cfg
    q = scene.field.positions[ids]
    nb = scene.index.knn(q, kc.k, kc.search_radius, exclude=ids)
    Rv, tv = scene.frames()
    view_of = np.zeros(n, dtype=np.int64)
    alpha = _kernel_alpha(scene, model, q, nb, Rv[view_of], tv[view_of], scene.log_cfg.offset_scale)
    drop = ids[alpha <= cfg.t_opacity]
    info = dict(tested=n, removed=len(drop))
    if len(drop) == 0 or len(drop) == N:
        if len(drop) == N:
            log.warning("pruning would remove every point; pass aborted")
            info["removed"] = 0
        return (scene, info) if return_info else scene
    keep = np.ones(N, dtype=bool)
    keep[drop] = False
    new = _replace_field(scene, scene.field.subset(keep))
    return (new, info) if return_info else new


# Stage 3: refinement ---------------------------------------------------------


def refine_points(scene: Scene, model: Model, cfg: FinetuneConfig, iters: Optional[int] = None,
                  batch_rays: int = 512, sampler: str = "log16", pool: Optional[RayPool] = None,
                  return_offsets: bool = False):
    """Optimize per-point offsets with everything else frozen.

    Loss: rendering MSE + ``refine_offset_weight * mean_i ||dp_i / s||^2``
    with s the kernel's position normalization (scene_scale), i.e. offsets
    measured in the coordinates the spatial encoding sees. Steps are
    ``lr_offsets * r`` (r the search radius). An infinite weight pins
    offsets at 0.
    Neighbor sets come from the unrefined index. Depth maps are recomputed
    for the refined field.
    """
    iters = cfg.refine_iters if iters is None else iters
    N = len(scene.field)
    off = np.zeros((N, 3))
    if iters > 0 and np.isfinite(cfg.refine_offset_weight):
        pool = pool or RayPool.from_scene(scene)
        rng = np.random.default_rng(cfg.seed)
        opt = Adam()
        r = scene.kernel_cfg.search_radius
        ps = scene.kernel_cfg.position_scale
        base = scene.field.positions
        w = model.weights()
        lam = cfg.refine_offset_weight
        for it in range(iters):
            ids = rng.choice(len(pool), size=min(batch_rays, len(pool)), replace=False)
            loss, _, pids, _, dpu = batch_loss_and_grads(
                scene, model, w, pool.rays.take(ids), pool.colors[ids], sampler, rng=rng, perturb=True,
                positions=base + off, need_positions=True, need_params=False,
            )
            g = 2.0 * lam * off / (N * ps * ps)
            if dpu is not None:
                g[pids] += dpu
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite offset gradient at iteration {it}", it, ids)
            box = {"p": off}
            opt.step(box, {"p": g}, {"p": cfg.lr_offsets * r * cosine_lr(1.0, it, iters)})
            off = box["p"]
    out = scene
    if np.any(off != 0):
        out = refresh_depth_maps(_replace_field(scene, scene.field.with_positions(scene.field.positions + off)))
    return (out, off) if return_offsets else out


# Schedule -------------------------------------------------------------------


def validation_loss(scene: Scene, model: Model, views: Optional[Sequence[CameraView]] = None,
                    sampler: str = "log16") -> float:
    """Noise-free rendering MSE over all pixels of ``views`` (default: the training views).

    Views outside the scene get depth maps estimated from the current field.
    """
    if views is None:
        sub = scene
    else:
        sub = scene.with_views([v.replace(depth_map=estimate_depth_map(scene.field, scene.index, v, scene.depth_cfg))
                                for v in views])
    pool = RayPool.from_scene(sub, only_hits=False)
    rgb, _, _ = render_rays(sub, model, pool.rays, sampler)
    return mse_loss(np.clip(rgb, 0, 1), pool.colors)[0]


@dataclass
class FinetuneResult:
    scene: Scene
    model: Model
    records: List[dict]
    best_loss: float
    initial_loss: float


def finetune_schedule(scene: Scene, model: Model, cfg: FinetuneConfig, train_cfg: TrainConfig = TrainConfig(),
                      stages=(1, 2, 3), val_views: Optional[Sequence[CameraView]] = None) -> FinetuneResult:
    """Cycle feature tuning, grow+prune and refinement until validation loss stalls.

    Returns the best checkpoint seen (the input counts as cycle 0). Each
    cycle emits three stage records; skipped stages record the loss
    unchanged.
    """
    scene = bake_features(scene, model)
    model = replace(model, fetch=None)
    if cfg.max_cycles == 0:
        return FinetuneResult(scene, model, [], float("nan"), float("nan"))
    loss0 = validation_loss(scene, model, val_views, train_cfg.sampler)
    best = (loss0, scene, model)
    records: List[dict] = []
    rng = np.random.default_rng(cfg.seed)
    prev = loss0
    for cycle in range(cfg.max_cycles):
        if 1 in stages:
            tc = replace(train_cfg, iters=cfg.stage1_iters, train_features=True, seed=cfg.seed + cycle)
            res = train(scene, model, tc)
            scene, model = res.scene, res.model
        records.append(_record(cycle, 1, scene, model, val_views, train_cfg.sampler))
        if 2 in stages:
            for _ in range(cfg.stage2_passes):
                scene, ginfo = grow_points(scene, model, cfg, rng=rng, return_info=True)
                scene, pinfo = prune_points(scene, model, cfg, rng=rng, return_info=True)
            scene = refresh_depth_maps(scene)
        records.append(_record(cycle, 2, scene, model, val_views, train_cfg.sampler))
        if 3 in stages:
            scene = refine_points(scene, model, replace(cfg, seed=cfg.seed + cycle), sampler=train_cfg.sampler)
        rec = _record(cycle, 3, scene, model, val_views, train_cfg.sampler)
        records.append(rec)
        loss = rec["loss"]
        if loss < best[0]:
            best = (loss, scene, model)
        if (prev - loss) / max(prev, 1e-12) < cfg.min_improvement:
            break
        prev = loss
    return FinetuneResult(best[1], best[2], records, best[0], loss0)


def _record(cycle, stage, scene, model, views, sampler):
    loss = validation_loss(scene, model, views, sampler)
    log.info("cycle %d stage %d: loss %.6g, %d points", cycle, stage, loss, len(scene.field))
    return {"cycle": cycle, "stage": stage, "loss": loss, "n_points": len(scene.field)}
