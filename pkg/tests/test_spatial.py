import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpf.core import NeuralPointField
from gpf.spatial import SpatialIndex, StaleIndexError, build_index, k_nearest, radius_neighbors


def brute_radius(P, q, r):
    d = np.linalg.norm(P - q, axis=1)
    idx = np.flatnonzero(d <= r)
    o = np.lexsort((idx, d[idx]))
    return [(int(idx[i]), float(d[idx[i]])) for i in o]


def brute_knn(P, q, k, r):
    return brute_radius(P, q, r)[:k]


def test_single_point_single_cell():
    f = NeuralPointField.from_positions(np.zeros((1, 3)))
    assert build_index(f, 0.1).cells == {(0, 0, 0): [0]}


def test_cube_corners_distinct_cells():
    P = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    idx = SpatialIndex(P, 0.5)
    assert len(idx.cells) == 8
    assert sorted(i for v in idx.cells.values() for i in v) == list(range(8))


def test_every_point_in_its_cell(rng):
    P = rng.random((500, 3))
    idx = SpatialIndex(P, 0.07)
    for cell, members in idx.cells.items():
        for i in members:
            assert tuple(np.floor((P[i] - idx.origin) / idx.cell_size).astype(int)) == cell


def test_radius_matches_brute_force_10k(rng):
    P = rng.random((10000, 3))
    idx = SpatialIndex(P, 0.05)
    for q in rng.random((100, 3)) * 1.2 - 0.1:
        got = radius_neighbors(idx, q, 0.05)
        exp = brute_radius(P, q, 0.05)
        assert [g[0] for g in got] == [e[0] for e in exp]
        assert np.allclose([g[1] for g in got], [e[1] for e in exp], rtol=0, atol=1e-12)


def test_query_on_point_and_far_query():
    P = np.array([[0, 0, 0], [1, 1, 1.0]])
    idx = SpatialIndex(P, 0.5)
    assert radius_neighbors(idx, [0, 0, 0], 1e-9) == [(0, 0.0)]
    assert radius_neighbors(idx, [5, 5, 5], 0.5) == []
    assert k_nearest(idx, [1, 1, 1], 1, 0.1) == [(1, 0.0)]


def test_knn_fewer_than_k():
    P = np.array([[i * 0.1, 0, 0] for i in range(5)] + [[5, 5, 5]], dtype=float)
    idx = SpatialIndex(P, 0.5)
    assert len(k_nearest(idx, [0.2, 0, 0], 8, 1.0)) == 5


def test_knn_ties_lower_index_first():
    P = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0.0]])
    idx = SpatialIndex(P, 0.7)
    assert [i for i, _ in k_nearest(idx, [0, 0, 0], 3, 2.0)] == [0, 1, 2]


def test_invalid_arguments():
    idx = SpatialIndex(np.zeros((2, 3)), 1.0)
    with pytest.raises(ValueError):
        SpatialIndex(np.zeros((2, 3)), 0.0)
    with pytest.raises(ValueError):
        idx.knn(np.zeros((1, 3)), 0, 1.0)
    with pytest.raises(ValueError):
        idx.query_radius(np.zeros((1, 3)), 0.0)


def test_stale_index_detected():
    f = NeuralPointField.from_positions(np.random.default_rng(0).random((10, 3)))
    idx = build_index(f, 0.2)
    idx.check(f)
    g = f.with_positions(f.positions * 2)
    with pytest.raises(StaleIndexError):
        idx.check(g)


@given(
    n=st.integers(1, 120),
    k=st.integers(1, 8),
    r=st.floats(0.01, 0.6),
    cell=st.floats(0.02, 0.8),
    seed=st.integers(0, 10**6),
    grid=st.booleans(),
)
def test_knn_equals_brute_force(n, k, r, cell, seed, grid):
    g = np.random.default_rng(seed)
    # lattice points make exact distance ties common
    P = np.round(g.random((n, 3)) * 4) / 4 if grid else g.random((n, 3))
    Q = np.round(g.random((20, 3)) * 4) / 4 if grid else g.random((20, 3)) * 1.4 - 0.2
    idx = SpatialIndex(P, cell)
    nb = idx.knn(Q, k, r)
    for qi, q in enumerate(Q):
        exp = brute_knn(P, q, k, r)
        m = nb.mask[qi]
        assert list(nb.idx[qi][m]) == [e[0] for e in exp]
        assert np.allclose(nb.dist[qi][m], [e[1] for e in exp], atol=1e-12)
        assert np.all(nb.idx[qi][~m] == -1) and np.all(np.isinf(nb.dist[qi][~m]))


@given(n=st.integers(1, 80), r=st.floats(0.01, 0.5), seed=st.integers(0, 10**6))
def test_radius_set_equals_brute_force(n, r, seed):
    g = np.random.default_rng(seed)
    P = g.random((n, 3))
    idx = SpatialIndex(P, r)
    q = g.random(3)
    assert [i for i, _ in radius_neighbors(idx, q, r)] == [e[0] for e in brute_radius(P, q, r)]


def test_knn_exclude(rng):
    P = rng.random((200, 3))
    idx = SpatialIndex(P, 0.2)
    ids = np.arange(50)
    nb = idx.knn(P[ids], 4, 0.2, exclude=ids)
    assert not np.any(nb.idx == ids[:, None])
