import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpf.core import NeuralPointField
from gpf.edit import parse_region, rigid_matrix, select_points, transfer_features, transform_points
from oracles import idw_oracle
from conftest import random_rigid


def _field(g, n):
    f = NeuralPointField.from_positions(g.normal(size=(n, 3)), g.random((n, 3)))
    feats = f.features
    feats[:, 3:] = g.normal(size=(n, 40))
    return f.with_features(feats)


def test_identity_is_bit_exact(rng):
    f = _field(rng, 20)
    assert transform_points(f, [0, 3], np.eye(4)) is f


def test_translate_there_and_back(rng):
    f = _field(rng, 20)
    t = rng.normal(size=3)
    sel = np.arange(5, 15)
    g = transform_points(transform_points(f, sel, rigid_matrix(np.eye(3), t)), sel, rigid_matrix(np.eye(3), -t))
    assert np.allclose(g.positions, f.positions, atol=1e-12)
    assert np.array_equal(g.features, f.features)
    assert g.revision != f.revision


def test_rigid_move_only_selected(rng):
    f = _field(rng, 10)
    T = random_rigid(rng)
    g = transform_points(f, [2, 7], T)
    assert np.allclose(g.positions[[2, 7]], f.positions[[2, 7]] @ T[:3, :3].T + T[:3, 3])
    rest = np.setdiff1d(np.arange(10), [2, 7])
    assert np.array_equal(g.positions[rest], f.positions[rest])


def test_transform_errors(rng):
    f = _field(rng, 5)
    with pytest.raises(ValueError):
        transform_points(f, [0], np.diag([1.0, 1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        transform_points(f, [], np.eye(4))
    with pytest.raises(IndexError):
        transform_points(f, [5], np.eye(4))
    with pytest.raises(ValueError):
        transform_points(f, [0], np.eye(3))


def test_transfer_self_is_identity_and_idempotent(rng):
    f = _field(rng, 40)
    g = transfer_features(f, f, "all")
    assert np.array_equal(g.features, f.features)
    assert np.array_equal(transfer_features(g, g, "all").features, g.features)


def test_transfer_midpoint_mean(rng):
    src = _field(rng, 2)
    mid = NeuralPointField.from_positions(src.positions.mean(axis=0, keepdims=True))
    out = transfer_features(src, mid, "all", k=2)
    assert np.allclose(out.features[0], src.features.mean(axis=0), atol=1e-12)


@given(st.integers(1, 60), st.integers(1, 30), st.integers(1, 8), st.integers(0, 10**6))
def test_transfer_matches_brute_force(ns, nd, k, seed):
    g = np.random.default_rng(seed)
    src, dst = _field(g, ns), _field(g, nd)
    out = transfer_features(src, dst, "all", k=k)
    ref = np.array([idw_oracle(src.positions, src.features, q, min(k, ns)) for q in dst.positions])
    assert np.allclose(out.features, ref, atol=1e-10)


def test_recolor_keeps_high_features(rng):
    src, dst = _field(rng, 30), _field(rng, 30)
    out = transfer_features(src, dst, "color+low")
    assert np.array_equal(out.features[:, 11:], dst.features[:, 11:])
    assert not np.allclose(out.features[:, :11], dst.features[:, :11])
    out = transfer_features(src, dst, "high")
    assert np.array_equal(out.features[:, :11], dst.features[:, :11])
    with pytest.raises(ValueError):
        transfer_features(src, dst, "colour")


@given(st.integers(1, 80), st.integers(0, 10**6))
def test_select_matches_brute_force(n, seed):
    g = np.random.default_rng(seed)
    P = np.round(g.normal(size=(n, 3)), 1)
    lo, hi = np.sort(np.round(g.normal(size=(2, 3)), 1), axis=0)
    box = [i for i in range(n) if all(lo[a] <= P[i, a] <= hi[a] for a in range(3))]
    assert select_points(P, ("box", lo, hi)).tolist() == box
    c, r = np.round(g.normal(size=3), 1), 0.7
    ball = [i for i in range(n) if sum((P[i, a] - c[a]) ** 2 for a in range(3)) <= r * r]
    assert select_points(P, ("sphere", c, r)).tolist() == ball


def test_select_examples(rng):
    P = rng.normal(size=(30, 3))
    assert select_points(P, "box:-100,-100,-100,100,100,100").tolist() == list(range(30))
    assert select_points(P, "box:50,50,50,60,60,60").size == 0
    assert select_points(P, "sphere:0,0,0,0").size == 0
    for bad in ("box:1,2,3", "cone:1,2,3,4", "sphere:0,0,0,-1", "box:a,b,c,d,e,f"):
        with pytest.raises(ValueError):
            parse_region(bad)
