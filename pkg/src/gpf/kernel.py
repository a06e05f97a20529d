"""Feature-augmented learnable aggregation kernel and the density/color decoders.

The batched path works on padded neighbor tensors of shape (M, K): M query
samples, K neighbor slots, with a boolean mask for filled slots. Masked
slots contribute exactly zero to outputs and gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import COLOR_DIM, HIGH_DIM, LOW_DIM, NeuralPointField
from .depth import CANONICAL_UNITS_PER_SCENE
from .nn import masked_softmax, mlp_backward, mlp_forward, mlp_init, sigmoid, softplus

HIDDEN = 32
SPATIAL_IN = 7
COLOR_FEAT = LOW_DIM + COLOR_DIM
AGGREGATORS = ("learned", "idw")
TARGETS = ("density", "color")


@dataclass(frozen=True)
class KernelConfig:
    """Neighborhood and normalization constants for kernel aggregation.

    Lengths left as ``None`` are derived from scene_scale by
    :meth:`resolved`: the search radius as ``search_radius_frac * scale``,
    the density length unit as ``scale / 500`` and the position
    normalization as ``scale``.
    """

    k: int = 8
    search_radius: Optional[float] = None
    search_radius_frac: float = 0.005
    density_unit: Optional[float] = None
    position_scale: Optional[float] = None

    def __post_init__(self):
        if not 1 <= self.k <= 8:
            raise ValueError("k must be in [1, 8]")

    def resolved(self, scene_scale: float) -> "KernelConfig":
        return replace(
            self,
            search_radius=self.search_radius if self.search_radius is not None else self.search_radius_frac * scene_scale,
            density_unit=self.density_unit if self.density_unit is not None else scene_scale / CANONICAL_UNITS_PER_SCENE,
            position_scale=self.position_scale if self.position_scale is not None else scene_scale,
        )


@dataclass
class KernelParameters:
    """Kernel MLPs plus the two decoders, as a flat weight dict."""

    weights: dict
    aggregator: str = "learned"

    @classmethod
    def init(cls, seed: int = 0, aggregator: str = "learned") -> "KernelParameters":
        if aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        rng = np.random.default_rng(seed)
        w: dict = {}
        if aggregator == "learned":
            w.update(mlp_init(rng, "kernel.spatial", [SPATIAL_IN, HIDDEN, HIDDEN]))
            w.update(mlp_init(rng, "kernel.weight", [HIDDEN, HIDDEN, 1]))
            w.update(mlp_init(rng, "kernel.fuse_density", [HIDDEN + HIGH_DIM, HIDDEN, 1 + HIDDEN]))
            w.update(mlp_init(rng, "kernel.fuse_color", [HIDDEN + COLOR_FEAT, HIDDEN, 1 + HIDDEN]))
            dens_in, col_in = HIDDEN, HIDDEN
        else:
            dens_in, col_in = HIGH_DIM, COLOR_FEAT
        w.update(mlp_init(rng, "decoder.sigma", [dens_in, HIDDEN, 1]))
        w.update(mlp_init(rng, "decoder.color", [col_in, HIDDEN, 3]))
        return cls(w, aggregator)


def _split(feats):
    return feats[..., :COLOR_DIM], feats[..., COLOR_DIM : COLOR_DIM + LOW_DIM], feats[..., COLOR_DIM + LOW_DIM :]


def spatial_inputs(query, nbr_pos, rot, trans, radius: float, position_scale: float):
    """Per-neighbor 7-vectors ``[p_cam / s, (p - q)_cam / r, ||(p - q)_cam||_1 / r]``.

    Positions are expressed in the camera frame (``rot``, ``trans``: (M,3,3),
    (M,3)) so that moving a scene and its camera together leaves the kernel
    inputs unchanged. Returns (x (M,K,7), offsets (M,K,3) in camera frame).
    """
    p_cam = np.einsum("mij,mkj->mki", rot, nbr_pos) + trans[:, None, :]
    off = np.einsum("mij,mkj->mki", rot, nbr_pos - query[:, None, :])
    l1 = np.abs(off).sum(axis=2, keepdims=True)
    x = np.concatenate([p_cam / position_scale, off / radius, l1 / radius], axis=2)
    return x, off


def kernel_forward(weights: dict, aggregator: str, query, nbr_pos, feats, mask, rot, trans, cfg: KernelConfig):
    """Aggregate neighbor features and decode.

    Args:
        query: (M, 3) sample positions (world).
        nbr_pos: (M, K, 3) neighbor positions (world); masked slots arbitrary but finite.
        feats: (M, K, 43) neighbor ``[f_c | f_l | f_h]``.
        mask: (M, K) filled-slot mask; every row needs at least one True.
        rot, trans: per-query camera frame, (M, 3, 3) and (M, 3).

    Returns:
        ``(sigma, color, cache)`` with sigma (M,) >= 0 in network units and
        color (M, 3) in (0, 1).
    """
    M, K = mask.shape
    dt = weights["decoder.sigma.W0"].dtype
    feats = feats.astype(dt, copy=False)
    f_c, f_l, f_h = _split(feats)
    cache: dict = dict(mask=mask, rot=rot, K=K, radius=cfg.search_radius, position_scale=cfg.position_scale)
    if aggregator == "learned":
        # MLPs run on filled slots only; softmax and sums use the padded layout.
        ent = np.flatnonzero(mask.ravel())
        x, off = spatial_inputs(query, nbr_pos, rot, trans, cfg.search_radius, cfg.position_scale)
        xe = x.reshape(M * K, SPATIAL_IN)[ent].astype(dt, copy=False)
        fe = feats.reshape(M * K, -1)[ent]
        fc_e, fl_e, fh_e = _split(fe)
        hs, c_sp = mlp_forward(weights, "kernel.spatial", xe)
        w_hat, c_w = mlp_forward(weights, "kernel.weight", hs)
        w_hat = w_hat[:, 0]
        o_d, c_fd = mlp_forward(weights, "kernel.fuse_density", np.concatenate([hs, fh_e], axis=1))
        o_c, c_fc = mlp_forward(weights, "kernel.fuse_color", np.concatenate([hs, fl_e, fc_e], axis=1))
        branches = {}
        F = {}
        for name, o in (("density", o_d), ("color", o_c)):
            v = sigmoid(o[:, 0])
            He = np.maximum(o[:, 1:], 0.0)
            logits = np.zeros(M * K, dtype=dt)
            logits[ent] = v * w_hat
            H = np.zeros((M * K, HIDDEN), dtype=dt)
            H[ent] = He
            H = H.reshape(M, K, HIDDEN)
            a = masked_softmax(logits.reshape(M, K), mask)
            F[name] = np.einsum("mk,mkd->md", a, H)
            branches[name] = (v, He, H, a)
        cache.update(ent=ent, off=off, c_sp=c_sp, c_w=c_w, c_fd=c_fd, c_fc=c_fc, w_hat=w_hat, branches=branches)
    else:
        d = np.linalg.norm(nbr_pos - query[:, None, :], axis=2)
        tiny = 1e-12 * cfg.search_radius
        w = np.where(mask, 1.0 / np.maximum(d, tiny), 0.0)
        wsum = w.sum(axis=1, keepdims=True)
        a = (w / wsum).astype(dt, copy=False)
        F = {
            "density": np.einsum("mk,mkd->md", a, f_h),
            "color": np.einsum("mk,mkd->md", a, np.concatenate([f_l, f_c], axis=2)),
        }
        cache.update(a_idw=a, wsum=wsum, d=d, diff=nbr_pos - query[:, None, :], tiny=tiny, feats=feats)
    raw_s, c_ds = mlp_forward(weights, "decoder.sigma", F["density"])
    raw_c, c_dc = mlp_forward(weights, "decoder.color", F["color"])
    sigma = softplus(raw_s[:, 0])
    color = sigmoid(raw_c)
    cache.update(raw_s=raw_s[:, 0], color=color, c_ds=c_ds, c_dc=c_dc, F=F)
    return sigma, color, cache


def kernel_backward(weights: dict, aggregator: str, cache: dict, dsigma, dcolor, grads: dict, need_positions=False):
    """Backprop through decoders and aggregation.

    Returns ``(dfeats (M,K,43), dpos (M,K,3) or None)``; parameter gradients
    are accumulated into ``grads``.
    """
    mask, K = cache["mask"], cache["K"]
    M = mask.shape[0]
    dt = cache["color"].dtype
    draw_s = (dsigma * sigmoid(cache["raw_s"]))[:, None].astype(dt, copy=False)
    col = cache["color"]
    draw_c = (dcolor * col * (1.0 - col)).astype(dt, copy=False)
    dF = {
        "density": mlp_backward(weights, "decoder.sigma", cache["c_ds"], draw_s, grads),
        "color": mlp_backward(weights, "decoder.color", cache["c_dc"], draw_c, grads),
    }
    if aggregator == "idw":
        a = cache["a_idw"]
        dfh = a[..., None] * dF["density"][:, None, :]
        dlc = a[..., None] * dF["color"][:, None, :]
        dfeats = np.concatenate([dlc[..., LOW_DIM:], dlc[..., :LOW_DIM], dfh], axis=2)
        if not need_positions:
            return dfeats, None
        f_c, f_l, f_h = _split(cache["feats"])
        da = np.einsum("md,mkd->mk", dF["density"], f_h) + np.einsum(
            "md,mkd->mk", dF["color"], np.concatenate([f_l, f_c], axis=2))
        dw = (da - (a * da).sum(axis=1, keepdims=True)) / cache["wsum"]
        d = cache["d"]
        live = mask & (d > cache["tiny"])
        dd = np.where(live, -dw / np.where(live, d, 1.0) ** 2, 0.0)
        dpos = (dd / np.where(live, d, 1.0))[..., None] * cache["diff"]
        return dfeats, dpos

    w_hat, ent = cache["w_hat"], cache["ent"]
    dw_hat = np.zeros_like(w_hat)
    do = {}
    for name in TARGETS:
        v, He, H, a = cache["branches"][name]
        g = dF[name]
        dHe = (a[..., None] * g[:, None, :]).reshape(M * K, HIDDEN)[ent]
        da = np.einsum("md,mkd->mk", g, H)
        dl = (a * (da - (a * da).sum(axis=1, keepdims=True))).reshape(M * K)[ent]
        dv = dl * w_hat
        dw_hat += dl * v
        do[name] = np.concatenate([(dv * v * (1.0 - v))[:, None], dHe * (He > 0)], axis=1)
    din_d = mlp_backward(weights, "kernel.fuse_density", cache["c_fd"], do["density"], grads)
    din_c = mlp_backward(weights, "kernel.fuse_color", cache["c_fc"], do["color"], grads)
    dhs = din_d[:, :HIDDEN] + din_c[:, :HIDDEN]
    dhs += mlp_backward(weights, "kernel.weight", cache["c_w"], dw_hat[:, None], grads)
    dx = mlp_backward(weights, "kernel.spatial", cache["c_sp"], dhs, grads, need_dx=need_positions)
    dfe = np.concatenate([din_c[:, HIDDEN + LOW_DIM :], din_c[:, HIDDEN : HIDDEN + LOW_DIM], din_d[:, HIDDEN:]], axis=1)
    dfeats = np.zeros((M * K, dfe.shape[1]), dtype=dfe.dtype)
    dfeats[ent] = dfe
    dfeats = dfeats.reshape(M, K, -1)
    dpos = None
    if need_positions:
        dxp = np.zeros((M * K, SPATIAL_IN), dtype=dx.dtype)
        dxp[ent] = dx
        dx = dxp.reshape(M, K, SPATIAL_IN)
        dcam = dx[..., :3] / cache["position_scale"] + (dx[..., 3:6] + np.sign(cache["off"]) * dx[..., 6:7]) / cache["radius"]
        dpos = np.einsum("mji,mkj->mki", cache["rot"], dcam)
    return dfeats, dpos


# Single-query reference API -------------------------------------------------


def _frame(frame):
    if frame is None:
        return np.eye(3), np.zeros(3)
    frame = np.asarray(frame, dtype=np.float64)
    return frame[:3, :3], frame[:3, 3]


def spatial_encode(query, neighbor, params: KernelParameters, frame=None, radius: float = 1.0, position_scale: float = 1.0):
    """Spatial feature ``h_s`` of one neighbor relative to one query point."""
    R, t = _frame(frame)
    x, _ = spatial_inputs(
        np.asarray(query, dtype=np.float64)[None], np.asarray(neighbor, dtype=np.float64)[None, None],
        R[None], t[None], radius, position_scale,
    )
    hs, _ = mlp_forward(params.weights, "kernel.spatial", x.reshape(1, SPATIAL_IN))
    return hs[0]


def kernel_aggregate(query, neighbors, field: NeuralPointField, params: KernelParameters, target: str,
                     cfg: KernelConfig, frame=None):
    """Aggregated feature vector for one query, or ``None`` when there are no neighbors.

    ``neighbors`` is a k-NN result: a list of point indices or of
    ``(index, distance)`` pairs.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    ids = [n[0] if isinstance(n, tuple) else int(n) for n in neighbors]
    if not ids:
        return None
    if len(ids) > cfg.k:
        raise ValueError(f"at most k={cfg.k} neighbors allowed")
    R, t = _frame(frame)
    ids = np.asarray(ids)
    _, _, cache = kernel_forward(
        params.weights, params.aggregator, np.asarray(query, dtype=np.float64)[None],
        field.positions[ids][None], field.features[ids][None], np.ones((1, len(ids)), bool), R[None], t[None], cfg,
    )
    return cache["F"][target][0]


def decode(F, params: KernelParameters, target: str):
    """Decode an aggregated feature: sigma >= 0 (softplus) or an RGB color in (0, 1)."""
    F = np.asarray(F, dtype=np.float64)[None]
    if target == "density":
        raw, _ = mlp_forward(params.weights, "decoder.sigma", F)
        return float(softplus(raw[0, 0]))
    if target == "color":
        raw, _ = mlp_forward(params.weights, "decoder.color", F)
        return sigmoid(raw[0])
    raise ValueError(f"target must be one of {TARGETS}")
