"""Ray sample placement: density-guided log sampling and uniform baselines."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import Ray

SAMPLERS = ("log16", "uni64", "uni128", "uni64+128", "surf2")


class SamplingFallback(ValueError):
    """The log-sampling center is unusable; the caller should sample uniformly."""


@dataclass(frozen=True)
class LogSamplingConfig:
    """Log-sampling constants.

    ``center_noise_sigma`` is a fraction of scene_scale; ``offset_scale`` is
    in scene units per unit of the log offsets and defaults to
    scene_scale / 200.
    """

    n_k: int = 8
    base: float = 1.8
    center_noise_sigma: float = 1e-4
    base_noise_halfwidth: float = 0.1
    offset_scale: Optional[float] = None
    rng_seed: int = 0
    center_noise_std: Optional[float] = None

    def __post_init__(self):
        if self.n_k < 1:
            raise ValueError("n_k must be >= 1")
        if self.base <= 1:
            raise ValueError("base must be > 1")
        if self.center_noise_sigma < 0 or self.base_noise_halfwidth < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.offset_scale is not None and self.offset_scale <= 0:
            raise ValueError("offset_scale must be positive")

    def resolved(self, scene_scale: float) -> "LogSamplingConfig":
        return replace(
            self,
            offset_scale=self.offset_scale if self.offset_scale is not None else scene_scale / 200.0,
            center_noise_std=self.center_noise_sigma * scene_scale,
        )

    def noise_free(self) -> "LogSamplingConfig":
        return replace(self, center_noise_sigma=0.0, base_noise_halfwidth=0.0, center_noise_std=0.0)


def log_exponents(n_k: int) -> np.ndarray:
    """Exponents (n_k / (n_k - 1)) * (i - 1) for i = 1..n_k (just [0] when n_k == 1)."""
    if n_k == 1:
        return np.zeros(1)
    return n_k / (n_k - 1) * np.arange(n_k)


def _perturbations(cfg: LogSamplingConfig, rng, n: int):
    std = cfg.center_noise_std or 0.0
    delta = rng.normal(0.0, std, n) if (rng is not None and std > 0) else np.zeros(n)
    w = cfg.base_noise_halfwidth
    eps = rng.uniform(-w, w, n) if (rng is not None and w > 0) else np.zeros(n)
    return delta, eps


def log_offsets(base, n_k: int, offset_scale: float) -> np.ndarray:
    """Positive offsets ``offset_scale * base**e``; ``base`` may be a per-ray array."""
    base = np.maximum(np.asarray(base, dtype=np.float64), 1.0 + 1e-6)
    return offset_scale * base[..., None] ** log_exponents(n_k)


def log_sample(ray: Ray, center_depth: float, cfg: LogSamplingConfig, rng=None) -> np.ndarray:
    """Symmetric log-spaced depths around ``center_depth`` (a ray parameter).

    ``cfg`` must be resolved. Returns ascending, de-duplicated depths
    clamped to the ray bounds.

    Raises:
        SamplingFallback: when the center lies outside (t_near, t_far).
    """
    if cfg.offset_scale is None or cfg.center_noise_std is None:
        raise ValueError("LogSamplingConfig must be resolved against a scene scale first")
    if not (ray.t_near < center_depth < ray.t_far):
        raise SamplingFallback(f"center {center_depth:.6g} outside ({ray.t_near:.6g}, {ray.t_far:.6g})")
    delta, eps = _perturbations(cfg, rng, 1)
    c = center_depth + delta[0]
    off = log_offsets(cfg.base + eps[0], cfg.n_k, cfg.offset_scale)
    t = np.clip(np.concatenate([c - off[::-1], c + off]), ray.t_near, ray.t_far)
    return np.unique(t)


def uniform_sample(ray: Ray, n: int, rng=None) -> np.ndarray:
    """Stratified samples: cell midpoints, or uniformly jittered within cells when ``rng`` is given."""
    if n < 2:
        raise ValueError("n must be >= 2")
    u = rng.uniform(0.0, 1.0, n) if rng is not None else np.full(n, 0.5)
    return ray.t_near + (np.arange(n) + u) * (ray.t_far - ray.t_near) / n


@dataclass(frozen=True)
class SamplingDecision:
    kind: str
    n_samples: int


def fallback_policy(ray: Ray, depth_map_value: float, n_k: int = 8) -> SamplingDecision:
    """Uniform sampling where the visible depth is unknown (0), log sampling otherwise."""
    if depth_map_value == 0:
        return SamplingDecision("uniform", 2 * n_k)
    return SamplingDecision("log", 2 * n_k)


@dataclass
class SampleSet:
    """Padded per-ray sample depths.

    ``valid`` is False for slots removed by de-duplication; those slots
    keep a depth equal to their successor so rows stay sorted.
    """

    t: np.ndarray
    valid: np.ndarray
    guided: np.ndarray


def _uniform_rows(near, far, n, rng):
    R = len(near)
    u = rng.uniform(0.0, 1.0, (R, n)) if rng is not None else np.full((R, n), 0.5)
    return near[:, None] + (np.arange(n) + u) * ((far - near) / n)[:, None]


def _dedup(t: np.ndarray):
    t = np.sort(t, axis=1)
    valid = np.ones(t.shape, dtype=bool)
    # Keep the last slot of each run of equal depths so its delta to the next
    # distinct depth is correct; earlier copies get delta 0 anyway.
    valid[:, :-1] = np.diff(t, axis=1) > 0
    return t, valid


def sample_batch(
    sampler: str,
    near: np.ndarray,
    far: np.ndarray,
    centers: np.ndarray,
    cfg: LogSamplingConfig,
    rng=None,
    jitter_uniform: bool = False,
) -> SampleSet:
    """Vectorized sampling for many rays.

    ``centers`` holds the log-sampling center per ray as a ray parameter,
    NaN where the visible depth is unknown. Rays whose center is unknown or
    outside (near, far) fall back to uniform sampling with the same sample
    count. ``rng`` drives the log perturbations and, with
    ``jitter_uniform``, stratified jitter of uniform samplers.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    R = len(near)
    jr = rng if jitter_uniform else None
    if sampler.startswith("uni"):
        counts = [int(s) for s in sampler[3:].split("+")]
        t = np.concatenate([_uniform_rows(near, far, n, jr) for n in counts], axis=1)
        t, valid = _dedup(t)
        return SampleSet(t, valid, np.zeros(R, dtype=bool))

    centers = np.asarray(centers, dtype=np.float64)
    guided = np.isfinite(centers) & (centers > near) & (centers < far)
    if sampler == "surf2":
        delta, _ = _perturbations(cfg, rng, R)
        off = np.full((R, 1), cfg.offset_scale)
        n = 2
    else:
        delta, eps = _perturbations(cfg, rng, R)
        off = log_offsets(cfg.base + eps, cfg.n_k, cfg.offset_scale)
        n = 2 * cfg.n_k
    c = np.where(guided, centers, 0.0) + delta
    t_log = np.concatenate([c[:, None] - off[:, ::-1], c[:, None] + off], axis=1)
    t_log = np.clip(t_log, near[:, None], far[:, None])
    t = np.where(guided[:, None], t_log, _uniform_rows(near, far, n, None))
    t, valid = _dedup(t)
    return SampleSet(t, valid, guided)
