"""Image feature pyramids and visibility-weighted fetching onto points."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import COLOR_DIM, HIGH_DIM, LOW_DIM, CameraView, NeuralPointField, bilinear_sample
from .depth import VisibilityTable
from .nn import mlp_backward, mlp_forward, mlp_init, sigmoid

HIDDEN = 32
LOW_IN = LOW_DIM + COLOR_DIM + 1
HIGH_SLOT = HIGH_DIM + COLOR_DIM
HIGH_IN = 3 * HIGH_SLOT
HIGH_SCALES = (0.5, 1.0, 2.0, 4.0)
ORIENTATIONS = np.radians([0.0, 45.0, 90.0, 135.0])


@dataclass(frozen=True)
class FeaturePyramid:
    low: np.ndarray
    high: np.ndarray


def _normalize_channels(stack: np.ndarray) -> np.ndarray:
    mean = stack.mean(axis=(0, 1), keepdims=True)
    std = stack.std(axis=(0, 1), keepdims=True)
    return (stack - mean) / np.where(std > 1e-12, std, 1.0)


def _gray(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.299, 0.587, 0.114])


def low_level_channels(image: np.ndarray) -> np.ndarray:
    """Un-normalized (H, W, 8): RGB, gray, Sobel-x, Sobel-y, |grad|, 3x3 variance."""
    g = _gray(image)
    gx = ndimage.sobel(g, axis=1, mode="nearest")
    gy = ndimage.sobel(g, axis=0, mode="nearest")
    mean = ndimage.uniform_filter(g, 3, mode="nearest")
    var = np.maximum(ndimage.uniform_filter(g * g, 3, mode="nearest") - mean * mean, 0.0)
    return np.dstack([image, g, gx, gy, np.hypot(gx, gy), var])


def high_level_channels(image: np.ndarray) -> np.ndarray:
    """Un-normalized (H/4, W/4, 32) multi-scale blur + oriented-gradient bank."""
    H, W = image.shape[:2]
    h4, w4 = H // 4, W // 4
    small = image[: 4 * h4, : 4 * w4].reshape(h4, 4, w4, 4, 3).mean(axis=(1, 3))
    g = _gray(small)
    chans = []
    for s in HIGH_SCALES:
        gb = ndimage.gaussian_filter(g, s, mode="nearest")
        gx = ndimage.sobel(gb, axis=1, mode="nearest")
        gy = ndimage.sobel(gb, axis=0, mode="nearest")
        chans.append(gb)
        chans.extend(np.abs(np.cos(a) * gx + np.sin(a) * gy) for a in ORIENTATIONS)
        chans.extend(ndimage.gaussian_filter(small[..., c], s, mode="nearest") for c in range(3))
    return np.dstack(chans)


def extract_feature_pyramid(image: np.ndarray) -> FeaturePyramid:
    """Deterministic stand-in for a learned U-Net: 8 full-res and 32 quarter-res channels."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite pixels")
    if image.shape[0] < 4 or image.shape[1] < 4:
        raise ValueError("image must be at least 4x4")
    return FeaturePyramid(_normalize_channels(low_level_channels(image)), _normalize_channels(high_level_channels(image)))


@dataclass
class FetchAggregatorParams:
    """Weights of the low-level (features+color) and high-level aggregators."""

    weights: dict

    @classmethod
    def init(cls, seed: int = 0) -> "FetchAggregatorParams":
        rng = np.random.default_rng(seed)
        w = mlp_init(rng, "fetch.low", [LOW_IN, HIDDEN, HIDDEN, 1 + LOW_DIM])
        w.update(mlp_init(rng, "fetch.high", [HIGH_IN, HIDDEN, HIDDEN, 1 + HIGH_DIM]))
        return cls(w)


@dataclass
class FetchInputs:
    """Image samples gathered for each point at its top-k views (constants w.r.t. params)."""

    views: np.ndarray
    scores: np.ndarray
    colors: np.ndarray
    low: np.ndarray
    high: np.ndarray

    @property
    def unseen(self) -> np.ndarray:
        return ~(self.scores > 0).any(axis=1)

    def take(self, ids: np.ndarray) -> "FetchInputs":
        return FetchInputs(self.views[ids], self.scores[ids], self.colors[ids], self.low[ids], self.high[ids])


def gather_fetch_inputs(
    field: NeuralPointField, views: Sequence[CameraView], table: VisibilityTable, top_k: Optional[int]
) -> FetchInputs:
    sel = table.top_k(top_k)
    N, k = sel.shape
    scores = np.take_along_axis(table.scores, sel, axis=1)
    colors = np.zeros((N, k, COLOR_DIM))
    low = np.zeros((N, k, LOW_DIM))
    high = np.zeros((N, k, HIGH_DIM))
    for vi, view in enumerate(views):
        rows, slots = np.nonzero(sel == vi)
        if len(rows) == 0:
            continue
        if view.pyramid is None or view.image is None:
            raise ValueError(f"view {vi} needs an image and a feature pyramid")
        pix, z = view.project(field.positions[rows])
        front = z > 0
        pix = np.where(front[:, None], pix, -1.0)
        colors[rows, slots] = bilinear_sample(view.image, pix)
        low[rows, slots] = bilinear_sample(view.pyramid.low, pix)
        scale = view.pyramid.high.shape[1] / view.width
        high[rows, slots] = bilinear_sample(view.pyramid.high, pix, scale=scale)
    return FetchInputs(sel, scores, colors, low, high)


def _normalized_weights(w: np.ndarray, v: np.ndarray):
    u = w * v
    S = u.sum(axis=1, keepdims=True)
    a = np.divide(u, S, out=np.zeros_like(u), where=S > 0)
    return a, S


def _norm_backward(da: np.ndarray, a: np.ndarray, S: np.ndarray, v: np.ndarray) -> np.ndarray:
    """dL/dw for a = (w v) / sum(w v)."""
    du = np.divide(da - (a * da).sum(axis=1, keepdims=True), S, out=np.zeros_like(da), where=S > 0)
    return du * v


def fetch_forward(weights: dict, inp: FetchInputs):
    """Aggregate view samples into per-point ``[f_c | f_l | f_h]`` (U, 43)."""
    U, k = inp.scores.shape
    dt = weights["fetch.low.W0"].dtype
    inp = FetchInputs(inp.views, *(a.astype(dt, copy=False) for a in (inp.scores, inp.colors, inp.low, inp.high)))
    v = inp.scores
    x_low = np.concatenate([inp.low, inp.colors, v[..., None]], axis=2).reshape(U * k, LOW_IN)
    o_low, c_low = mlp_forward(weights, "fetch.low", x_low)
    o_low = o_low.reshape(U, k, -1)
    w_l = sigmoid(o_low[..., 0])
    h_l = o_low[..., 1:]
    a_l, S_l = _normalized_weights(w_l, v)
    F_l = np.einsum("uk,ukd->ud", a_l, h_l)
    F_c = np.einsum("uk,ukd->ud", a_l, inp.colors)

    # First layer of the high path on concat(slot, mean, var): the mean/var
    # blocks are shared by a point's views, so their product is formed once.
    slot = np.concatenate([inp.high, inp.colors], axis=2)
    mean = slot.mean(axis=1)
    var = ((slot - mean[:, None]) ** 2).mean(axis=1)
    W0 = weights["fetch.high.W0"]
    shared = mean @ W0[HIGH_SLOT : 2 * HIGH_SLOT] + var @ W0[2 * HIGH_SLOT :] + weights["fetch.high.b0"]
    z0 = (slot.reshape(U * k, HIGH_SLOT) @ W0[:HIGH_SLOT]).reshape(U, k, -1)
    z0 += shared[:, None, :]
    h0 = np.maximum(z0, 0.0).reshape(U * k, -1)
    o_high, c_high = mlp_forward(weights, "fetch.high", h0, start=1)
    o_high = o_high.reshape(U, k, -1)
    w_h = sigmoid(o_high[..., 0])
    h_h = o_high[..., 1:]
    a_h, S_h = _normalized_weights(w_h, v)
    F_h = np.einsum("uk,ukd->ud", a_h, h_h)

    cache = dict(inp=inp, c_low=c_low, c_high=c_high, w_l=w_l, h_l=h_l, a_l=a_l, S_l=S_l,
                 w_h=w_h, h_h=h_h, a_h=a_h, S_h=S_h, slot=slot, mean=mean, var=var, h0=h0)
    return np.concatenate([F_c, F_l, F_h], axis=1), cache


def fetch_backward(weights: dict, cache: dict, dfeat: np.ndarray, grads: dict) -> None:
    inp = cache["inp"]
    U, k = inp.scores.shape
    v = inp.scores
    dfeat = dfeat.astype(v.dtype, copy=False)
    dF_c = dfeat[:, :COLOR_DIM]
    dF_l = dfeat[:, COLOR_DIM : COLOR_DIM + LOW_DIM]
    dF_h = dfeat[:, COLOR_DIM + LOW_DIM :]

    a_l, w_l = cache["a_l"], cache["w_l"]
    dh_l = a_l[..., None] * dF_l[:, None, :]
    da_l = np.einsum("ud,ukd->uk", dF_l, cache["h_l"]) + np.einsum("ud,ukd->uk", dF_c, inp.colors)
    dw_l = _norm_backward(da_l, a_l, cache["S_l"], v)
    do_low = np.concatenate([(dw_l * w_l * (1 - w_l))[..., None], dh_l], axis=2)
    mlp_backward(weights, "fetch.low", cache["c_low"], do_low.reshape(U * k, -1), grads, need_dx=False)

    a_h, w_h = cache["a_h"], cache["w_h"]
    dh_h = a_h[..., None] * dF_h[:, None, :]
    da_h = np.einsum("ud,ukd->uk", dF_h, cache["h_h"])
    dw_h = _norm_backward(da_h, a_h, cache["S_h"], v)
    do_high = np.concatenate([(dw_h * w_h * (1 - w_h))[..., None], dh_h], axis=2)
    dh0 = mlp_backward(weights, "fetch.high", cache["c_high"], do_high.reshape(U * k, -1), grads, start=1)
    dz0 = dh0 * (cache["h0"] > 0)
    dz_pt = dz0.reshape(U, k, -1).sum(axis=1)
    gW0 = np.concatenate([
        cache["slot"].reshape(U * k, HIGH_SLOT).T @ dz0, cache["mean"].T @ dz_pt, cache["var"].T @ dz_pt,
    ])
    grads["fetch.high.W0"] = grads.get("fetch.high.W0", 0.0) + gW0
    grads["fetch.high.b0"] = grads.get("fetch.high.b0", 0.0) + dz_pt.sum(axis=0)


def fetch_point_features(
    field: NeuralPointField,
    views: Sequence[CameraView],
    table: VisibilityTable,
    params: FetchAggregatorParams,
    top_k: Optional[int] = 3,
    return_flags: bool = False,
):
    """Fetch image features onto every point of ``field``.

    ``top_k=None`` uses all views (test-time behavior); values larger than
    the number of views are clamped. Points that no view sees get zero
    features; with ``return_flags`` their mask is returned alongside.
    """
    inp = gather_fetch_inputs(field, views, table, top_k)
    feats, _ = fetch_forward(params.weights, inp)
    out = field.with_features(feats)
    return (out, inp.unseen) if return_flags else out
