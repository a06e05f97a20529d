"""Tiny MLP toolkit with explicit forward caches and reverse-mode backprop.

Parameters live in flat ``{name: array}`` dicts; an MLP named ``prefix``
owns ``prefix.W{i}`` and ``prefix.b{i}``. Hidden layers use ReLU, the last
layer is linear (callers apply their own output activation).
"""

from __future__ import annotations

import numpy as np


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def mlp_init(rng: np.random.Generator, prefix: str, sizes) -> dict:
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.W{i}"] = glorot(rng, a, b)
        params[f"{prefix}.b{i}"] = np.zeros(b)
    return params


def mlp_depth(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}.W{n}" in params:
        n += 1
    return n


def mlp_forward(params: dict, prefix: str, x: np.ndarray, start: int = 0):
    """Returns ``(y, cache)``; cache holds every layer input for backprop.

    ``start`` skips the first layers: ``x`` is then the (post-ReLU) input of
    layer ``start``, for callers that evaluate the first layer themselves.
    """
    n = mlp_depth(params, prefix)
    cache = []
    h = x
    for i in range(start, n):
        cache.append(h)
        h = h @ params[f"{prefix}.W{i}"]
        h += params[f"{prefix}.b{i}"]
        if i < n - 1:
            np.maximum(h, 0.0, out=h)
    return h, cache


def mlp_backward(params: dict, prefix: str, cache: list, dy: np.ndarray, grads: dict, need_dx: bool = True,
                 start: int = 0):
    """Accumulate parameter gradients into ``grads``; returns dL/dx (or None).

    With ``start > 0`` the returned gradient is w.r.t. the post-ReLU input of
    layer ``start`` (the ReLU mask is not applied).
    """
    n = len(cache) + start
    g = dy.astype(params[f"{prefix}.W{start}"].dtype, copy=False)
    if g.dtype != np.float64:
        g = flush_tiny(g * 1)
    for i in reversed(range(start, n)):
        W = params[f"{prefix}.W{i}"]
        h_in = cache[i - start]
        grads[f"{prefix}.W{i}"] = grads.get(f"{prefix}.W{i}", 0.0) + h_in.T @ g
        # a ones-vector product reduces over rows several times faster than sum(axis=0)
        grads[f"{prefix}.b{i}"] = grads.get(f"{prefix}.b{i}", 0.0) + np.ones(len(g), g.dtype) @ g
        if i == start and not need_dx:
            return None
        # width-1 layers: a broadcast beats a thin matmul
        g = g * W[:, 0] if W.shape[1] == 1 else g @ W.T
        if i > start:
            # h_in is the ReLU output of layer i-1: zero exactly where inactive.
            g *= h_in > 0
    return g


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def flush_tiny(x: np.ndarray, rel: float = 1e-12) -> np.ndarray:
    """Zero entries below ``rel`` times the largest magnitude, in place.

    Samples far behind an opaque surface carry gradients near 1e-20 that end
    up as float32 subnormals, which slow BLAS several times over; at 1e-12
    the dropped mass is below float32 resolution.
    """
    if x.size:
        a = np.abs(x)
        x *= a >= rel * a.max()
    return x


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over entries where ``mask`` is True; all-False rows give zeros."""
    z = np.where(mask, logits, -np.inf)
    zmax = np.max(z, axis=1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    s = e.sum(axis=1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)
