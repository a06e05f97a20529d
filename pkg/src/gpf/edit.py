"""Direct edits on a neural point field: moving points, copying features, selecting regions."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import COLOR_DIM, LOW_DIM, NeuralPointField, bbox_diagonal
from .spatial import SpatialIndex

FEATURE_GROUPS = {
    "color+low": slice(0, COLOR_DIM + LOW_DIM),
    "high": slice(COLOR_DIM + LOW_DIM, None),
    "all": slice(0, None),
}


def transform_points(field: NeuralPointField, selection, transform) -> NeuralPointField:
    """Apply a 4x4 transform to the selected points; features are left as they are.

    The result is a new field (new revision), so indices, depth maps and
    visibility tables built on the input are stale afterwards.
    """
    T = np.asarray(transform, dtype=np.float64)
    if T.shape != (4, 4):
        raise ValueError(f"transform must be 4x4, got {T.shape}")
    if not np.isfinite(T).all() or abs(np.linalg.det(T)) < 1e-12:
        raise ValueError("transform must be finite and invertible")
    sel = np.unique(np.asarray(selection, dtype=np.int64).ravel())
    if len(sel) == 0:
        raise ValueError("selection is empty")
    if sel[0] < 0 or sel[-1] >= len(field):
        raise IndexError("selection index out of range")
    if np.array_equal(T, np.eye(4)):
        return field
    pos = field.positions.copy()
    p = pos[sel]
    q = p @ T[:3, :3].T + T[:3, 3]
    w = p @ T[3, :3] + T[3, 3]
    if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
        q = q / w[:, None]
    pos[sel] = q
    return field.with_positions(pos)


def idw_weights(dist: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Normalized 1/d weights per row; a zero distance takes all the weight."""
    exact = mask & (dist == 0)
    has_exact = exact.any(axis=1)
    with np.errstate(divide="ignore"):
        w = np.where(mask & ~exact, 1.0 / np.where(mask, dist, 1.0), 0.0)
    # first coincident neighbor wins (neighbors are ordered by distance, then index)
    first = exact & (np.cumsum(exact, axis=1) == 1)
    w = np.where(has_exact[:, None], first.astype(np.float64), w)
    s = w.sum(axis=1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w), where=s > 0)


def transfer_features(src: NeuralPointField, dst: NeuralPointField, which: str = "all", k: int = 8) -> NeuralPointField:
    """Replace ``which`` feature groups of ``dst`` with inverse-distance interpolation from ``src``."""
    if which not in FEATURE_GROUPS:
        raise ValueError(f"which must be one of {sorted(FEATURE_GROUPS)}, got {which!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(src) == 0:
        raise ValueError("source field is empty")
    k = min(k, len(src))
    idx = _knn_unbounded(src.positions, dst.positions, k)
    d = np.linalg.norm(src.positions[idx] - dst.positions[:, None, :], axis=2)
    w = idw_weights(d, np.ones_like(d, dtype=bool))
    sl = FEATURE_GROUPS[which]
    feats = dst.features
    feats[:, sl] = np.einsum("mk,mkf->mf", w, src.features[idx][:, :, sl])
    return dst.with_features(feats)


def _knn_unbounded(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points (ties by lower index) with no radius limit.

    Grid search with a doubling radius; a row holding k hits within r is
    exact. Queries still short after a few doublings fall back to brute force.
    """
    diag = max(bbox_diagonal(points), 1e-9)
    index = SpatialIndex(points, cell_size=diag / max(np.cbrt(len(points) / k), 1.0))
    out = np.full((len(queries), k), -1, dtype=np.int64)
    todo = np.arange(len(queries))
    r = index.cell_size
    for _ in range(3):
        if not len(todo):
            return out
        nb = index.knn(queries[todo], k, r)
        full = nb.mask.all(axis=1)
        out[todo[full]] = nb.idx[full]
        todo = todo[~full]
        r *= 2.0
    for s in range(0, len(todo), 256):
        q = todo[s : s + 256]
        d = np.linalg.norm(points[None, :, :] - queries[q, None, :], axis=2)
        # stable sort keeps the lower index first among equal distances
        out[q] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def parse_region(spec: str):
    """Parse ``"box:x0,y0,z0,x1,y1,z1"`` or ``"sphere:cx,cy,cz,r"``."""
    kind, _, rest = spec.partition(":")
    try:
        vals = [float(v) for v in rest.split(",")] if rest else []
    except ValueError as e:
        raise ValueError(f"bad region {spec!r}: {e}") from None
    if kind == "box" and len(vals) == 6:
        return ("box", np.array(vals[:3]), np.array(vals[3:]))
    if kind == "sphere" and len(vals) == 4 and vals[3] >= 0:
        return ("sphere", np.array(vals[:3]), vals[3])
    raise ValueError(f"bad region {spec!r}; expected box:x0,y0,z0,x1,y1,z1 or sphere:cx,cy,cz,r")


def select_points(field_or_points, region) -> np.ndarray:
    """Sorted indices of the points inside a box (bounds inclusive) or a closed ball."""
    pos = field_or_points.positions if isinstance(field_or_points, NeuralPointField) else np.asarray(field_or_points)
    if isinstance(region, str):
        region = parse_region(region)
    kind = region[0]
    if kind == "box":
        lo, hi = np.asarray(region[1], float), np.asarray(region[2], float)
        inside = ((pos >= lo) & (pos <= hi)).all(axis=1)
    elif kind == "sphere":
        c, r = np.asarray(region[1], float), float(region[2])
        inside = np.einsum("ij,ij->i", pos - c, pos - c) <= r * r
    else:
        raise ValueError(f"unknown region kind {kind!r}")
    return np.flatnonzero(inside)


def rigid_matrix(rotation: Sequence, translation: Sequence) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = np.asarray(rotation, dtype=np.float64)
    T[:3, 3] = np.asarray(translation, dtype=np.float64)
    return T
