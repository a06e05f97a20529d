"""Uniform-grid radius and k-nearest-neighbor search over a point field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import NeuralPointField

_DENSE_CELL_LIMIT = 1 << 24
_QUERY_CHUNK = 1 << 15


class StaleIndexError(RuntimeError):
    """A spatial index was used with a point field it was not built from."""


@dataclass
class NeighborBatch:
    """Fixed-width k-NN result for a batch of queries.

    ``idx`` and ``dist`` are (M, k); unused slots hold -1 and +inf. Within a
    row, results are ascending by distance with ties broken by lower index.
    """

    idx: np.ndarray
    dist: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.idx >= 0

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)


class SpatialIndex:
    """Points bucketed into cubic cells of side ``cell_size``.

    Cells are stored CSR-style: point indices sorted by linearized cell key,
    with per-cell start offsets (a dense table when the grid is small enough,
    binary search over occupied keys otherwise).
    """

    def __init__(self, positions: np.ndarray, cell_size: float, source_revision: int = 0):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3 or len(positions) == 0:
            raise ValueError("index needs a non-empty (N, 3) point array")
        self.positions = positions
        self.cell_size = float(cell_size)
        self.source_revision = source_revision
        self.origin = positions.min(axis=0)
        cells = self._cell_of(positions)
        self.dims = cells.max(axis=0) + 1
        keys = self._key(cells)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]
        n_cells = int(np.prod(self.dims))
        self._dense = n_cells <= _DENSE_CELL_LIMIT
        self._near_occupied: dict = {}
        if self._dense:
            counts = np.bincount(keys, minlength=n_cells)
            self.cell_start = np.concatenate([[0], np.cumsum(counts)])

    def __len__(self) -> int:
        return len(self.positions)

    def _cell_of(self, pts: np.ndarray) -> np.ndarray:
        return np.floor((pts - self.origin) / self.cell_size).astype(np.int64)

    def _key(self, cells: np.ndarray) -> np.ndarray:
        d = self.dims
        return (cells[..., 0] * d[1] + cells[..., 1]) * d[2] + cells[..., 2]

    def check(self, field: NeuralPointField) -> None:
        if field.revision != self.source_revision:
            raise StaleIndexError(
                f"index built for revision {self.source_revision}, field is revision {field.revision}"
            )

    @property
    def cells(self) -> dict:
        """Occupied cells as ``{(i, j, k): [point indices]}``."""
        out: dict = {}
        cells = self._cell_of(self.positions)
        for i, c in enumerate(map(tuple, cells)):
            out.setdefault(c, []).append(i)
        return out

    def _cell_ranges(self, keys: np.ndarray):
        if self._dense:
            return self.cell_start[keys], self.cell_start[keys + 1]
        return (np.searchsorted(self.sorted_keys, keys, "left"), np.searchsorted(self.sorted_keys, keys, "right"))

    def _active(self, qc: np.ndarray, span: int) -> np.ndarray:
        """Queries whose (2*span+1)^3 cell block touches an occupied cell.

        Uses a dilated occupancy grid (padded by ``span``) in dense mode; in
        sparse mode every query is treated as active.
        """
        if not self._dense:
            return np.ones(len(qc), dtype=bool)
        grid = self._near_occupied.get(span)
        if grid is None:
            occ = np.zeros(tuple(self.dims + 2 * span), dtype=bool)
            c = self._cell_of(self.positions) + span
            occ[c[:, 0], c[:, 1], c[:, 2]] = True
            # a cube dilation is separable; maximum_filter runs it axis by axis
            grid = ndimage.maximum_filter(occ, size=2 * span + 1, mode="constant", cval=False)
            self._near_occupied[span] = grid
        p = qc + span
        inside = ((p >= 0) & (p < np.array(grid.shape))).all(axis=1)
        act = np.zeros(len(qc), dtype=bool)
        pi = p[inside]
        act[inside] = grid[pi[:, 0], pi[:, 1], pi[:, 2]]
        return act

    def _candidates(self, queries: np.ndarray, r: float):
        """All (query, point) pairs within the cell neighborhood of radius r."""
        span = int(np.ceil(r / self.cell_size))
        rng = np.arange(-span, span + 1)
        offsets = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
        qc_all = self._cell_of(queries)
        active = np.flatnonzero(self._active(qc_all, span))
        qc = qc_all[active]
        nb = qc[:, None, :] + offsets[None, :, :]
        ok = ((nb >= 0) & (nb < self.dims)).all(axis=2)
        keys = np.where(ok, self._key(np.where(ok[..., None], nb, 0)), 0)
        start, end = self._cell_ranges(keys.ravel())
        counts = np.where(ok.ravel(), end - start, 0)
        total = int(counts.sum())
        qid = np.repeat(active.repeat(len(offsets)), counts)
        if total == 0:
            return qid, np.zeros(0, np.int64)
        csum = np.cumsum(counts)
        base = np.repeat(start - (csum - counts), counts)
        pid = self.order[base + np.arange(total)]
        return qid, pid

    def query_radius(self, queries: np.ndarray, r: float):
        """Radius search for many queries.

        Returns ``(qid, pid, dist)`` flat arrays sorted by query, then
        distance, then point index; only pairs with distance <= r.
        """
        if r <= 0:
            raise ValueError("radius must be positive")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        out_q, out_p, out_d = [], [], []
        for s in range(0, len(queries), _QUERY_CHUNK):
            q = queries[s : s + _QUERY_CHUNK]
            qid, pid = self._candidates(q, r)
            diff = self.positions[pid] - q[qid]
            d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            keep = d <= r
            qid, pid, d = qid[keep] + s, pid[keep], d[keep]
            # qid + d / r' lies in [qid, qid + 1): one float sort orders by query then distance
            key = qid + d / (r * (1.0 + 1e-9))
            o = np.argsort(key, kind="stable")
            ks = key[o]
            if np.any(ks[1:] == ks[:-1]):
                o = np.lexsort((pid, d, qid))
            out_q.append(qid[o])
            out_p.append(pid[o])
            out_d.append(d[o])
        if not out_q:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        return np.concatenate(out_q), np.concatenate(out_p), np.concatenate(out_d)

    def knn(self, queries: np.ndarray, k: int, r_max: float, exclude=None) -> NeighborBatch:
        """Up to ``k`` nearest points within ``r_max`` for each query.

        ``exclude`` optionally gives, per query, one point index to skip
        (used when evaluating a point against its own neighborhood).
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        M = len(queries)
        idx = np.full((M, k), -1, dtype=np.int64)
        dist = np.full((M, k), np.inf)
        qid, pid, d = self.query_radius(queries, r_max)
        if exclude is not None:
            keep = pid != np.asarray(exclude)[qid]
            qid, pid, d = qid[keep], pid[keep], d[keep]
        if len(qid) == 0:
            return NeighborBatch(idx, dist)
        first = np.searchsorted(qid, qid, "left")
        rank = np.arange(len(qid)) - first
        sel = rank < k
        idx[qid[sel], rank[sel]] = pid[sel]
        dist[qid[sel], rank[sel]] = d[sel]
        return NeighborBatch(idx, dist)

    def radius_neighbors(self, q, r: float) -> list:
        """Points with ``||p - q|| <= r`` as ``(index, distance)``, ascending."""
        _, pid, d = self.query_radius(np.asarray(q, dtype=np.float64)[None], r)
        return [(int(i), float(x)) for i, x in zip(pid, d)]

    def k_nearest(self, q, k: int, r_max: float) -> list:
        nb = self.knn(np.asarray(q, dtype=np.float64)[None], k, r_max)
        m = nb.mask[0]
        return [(int(i), float(x)) for i, x in zip(nb.idx[0][m], nb.dist[0][m])]


def build_index(field: NeuralPointField, cell_size: float) -> SpatialIndex:
    return SpatialIndex(field.positions, cell_size, field.revision)


def radius_neighbors(index: SpatialIndex, q, r: float) -> list:
    return index.radius_neighbors(q, r)


def k_nearest(index: SpatialIndex, q, k: int, r_max: float) -> list:
    return index.k_nearest(q, k, r_max)
