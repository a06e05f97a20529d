import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpf.core import Ray
from gpf.sampling import (LogSamplingConfig, SamplingFallback, fallback_policy, log_exponents, log_sample,
                          sample_batch, uniform_sample)


def _ray(near=0.0, far=100.0):
    return Ray(np.zeros(3), np.array([0, 0, 1.0]), near, far)


def _cfg(n_k=8, base=1.8, offset_scale=1.0, noise=False):
    c = LogSamplingConfig(n_k=n_k, base=base, offset_scale=offset_scale,
                          center_noise_sigma=1e-4 if noise else 0.0, base_noise_halfwidth=0.1 if noise else 0.0)
    return c.resolved(10.0)


def test_worked_example():
    assert log_exponents(2).tolist() == [0.0, 2.0]
    t = log_sample(_ray(0, 20), 10.0, _cfg(n_k=2, base=2.0))
    assert (t - 10.0).tolist() == [-4.0, -1.0, 1.0, 4.0]


def test_symmetric_without_noise():
    t = log_sample(_ray(0, 1e4), 5e3, _cfg())
    assert len(t) == 16
    assert np.allclose(t - 5e3, -(t - 5e3)[::-1])


@given(st.integers(2, 10), st.floats(1.05, 3.0), st.floats(0.01, 2.0))
def test_same_side_spacing_ratio(n_k, base, scale):
    t = log_sample(_ray(0, 1e6), 5e5, _cfg(n_k=n_k, base=base, offset_scale=scale))
    off = t[n_k:] - 5e5
    ratio = off[1:] / off[:-1]
    assert np.allclose(ratio, base ** (n_k / (n_k - 1)), rtol=1e-6)


@given(st.floats(0.5, 99.5), st.integers(0, 10**6), st.integers(1, 9))
def test_bounds_ascending_and_monotone_density(center, seed, n_k):
    ray = _ray(0.0, 100.0)
    cfg = _cfg(n_k=n_k, offset_scale=3.0, noise=True)
    t = log_sample(ray, center, cfg, rng=np.random.default_rng(seed))
    assert np.all(t >= ray.t_near) and np.all(t <= ray.t_far)
    assert np.all(np.diff(t) > 0)
    t0 = log_sample(_ray(0, 1e6), 5e5, _cfg(n_k=n_k))
    right = np.diff(t0[n_k:])
    assert np.all(np.diff(right) >= -1e-9)


def test_center_outside_bounds_falls_back():
    with pytest.raises(SamplingFallback):
        log_sample(_ray(1.0, 2.0), 3.0, _cfg())
    with pytest.raises(ValueError):
        log_sample(_ray(), 1.0, LogSamplingConfig())


def test_seeded_determinism():
    cfg = _cfg(noise=True)
    a = log_sample(_ray(), 40.0, cfg, rng=np.random.default_rng(7))
    b = log_sample(_ray(), 40.0, cfg, rng=np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_uniform_examples():
    assert uniform_sample(_ray(0, 1), 2).tolist() == [0.25, 0.75]
    assert np.allclose(np.diff(uniform_sample(_ray(0, 2), 4)), 0.5)
    with pytest.raises(ValueError):
        uniform_sample(_ray(), 1)


@given(st.integers(2, 50), st.integers(0, 10**6))
def test_jittered_uniform_within_strata(n, seed):
    t = uniform_sample(_ray(2, 5), n, rng=np.random.default_rng(seed))
    cell = np.floor((t - 2) / (3 / n)).astype(int)
    assert cell.tolist() == list(range(n))


def test_fallback_policy():
    assert fallback_policy(_ray(), 0.0).kind == "uniform"
    assert fallback_policy(_ray(), 0.0, n_k=8).n_samples == 16
    assert fallback_policy(_ray(), 3.0).kind == "log"


def test_batch_uses_uniform_exactly_where_depth_unknown(rng):
    R = 200
    near, far = np.zeros(R), np.full(R, 10.0)
    centers = np.where(np.arange(R) % 2 == 0, 5.0, np.nan)
    ss = sample_batch("log16", near, far, centers, _cfg())
    assert ss.guided.sum() == R // 2
    assert np.array_equal(ss.guided, np.arange(R) % 2 == 0)
    assert np.allclose(ss.t[1], (np.arange(16) + 0.5) * 10 / 16)


def test_batch_matches_single_ray_log_sample():
    cfg = _cfg(offset_scale=0.5)
    ss = sample_batch("log16", np.array([0.0]), np.array([20.0]), np.array([7.0]), cfg)
    assert np.allclose(ss.t[0][ss.valid[0]], log_sample(_ray(0, 20), 7.0, cfg))


def test_batch_samplers_and_dedup():
    cfg = _cfg(offset_scale=5.0)
    near, far = np.array([0.0]), np.array([10.0])
    ss = sample_batch("log16", near, far, np.array([9.0]), cfg)
    assert ss.valid.sum() < 16
    assert np.all(np.diff(ss.t[0]) >= 0)
    assert sample_batch("uni64", near, far, np.array([np.nan]), cfg).t.shape == (1, 64)
    both = sample_batch("uni64+128", near, far, np.array([np.nan]), cfg)
    assert both.t.shape == (1, 192) and both.valid.sum() == 192 - np.intersect1d(
        (np.arange(64) + 0.5) / 6.4, (np.arange(128) + 0.5) / 12.8).size
    s2 = sample_batch("surf2", near, far, np.array([4.0]), cfg)
    assert s2.t[0].tolist() == [-1.0 + 0.0, 9.0] or np.allclose(s2.t[0], np.clip([4 - 5, 4 + 5], 0, 10))
    with pytest.raises(ValueError):
        sample_batch("bogus", near, far, np.array([1.0]), cfg)


def test_config_validation():
    for kw in ({"n_k": 0}, {"base": 1.0}, {"center_noise_sigma": -1}, {"offset_scale": 0.0}):
        with pytest.raises(ValueError):
            LogSamplingConfig(**kw)
    assert LogSamplingConfig().resolved(2.0).offset_scale == pytest.approx(0.01)
