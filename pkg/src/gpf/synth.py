"""Procedural test scenes with analytic ground-truth images and depth maps."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import List, Optional

import numpy as np

from .core import CameraView, NeuralPointField, intrinsics_from_fov, look_at

SCENE_KINDS = ("sphere", "slab", "two_slabs", "textured_cube", "hole_slab")
LIGHT = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])
AMBIENT = 0.35


def _texture(base, a, b, freq, phase):
    """Smooth two-tone pattern on surface coordinates a, b in [-1, 1]."""
    base = np.asarray(base)
    s = np.sin(np.pi * freq * a + phase) * np.cos(np.pi * freq * b - 0.5 * phase)
    tint = np.stack([s, 0.6 * s, -s], axis=-1)
    return np.clip(base * (0.7 + 0.3 * s)[..., None] + 0.12 * tint, 0.0, 1.0)


@dataclass
class Rect:
    """Square patch ``center + a*half*u + b*half*v`` for a, b in [-1, 1]."""

    center: np.ndarray
    normal: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half: float
    base: np.ndarray
    freq: float = 2.0
    phase: float = 0.0
    hole: float = 0.0

    @property
    def area(self) -> float:
        return 4.0 * self.half**2

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ self.normal) / denom
        x = o + t[:, None] * d
        a = (x - self.center) @ self.u / self.half
        b = (x - self.center) @ self.v / self.half
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (np.abs(a) <= 1) & (np.abs(b) <= 1)
        return np.where(ok, t, np.inf), np.broadcast_to(self.normal, x.shape), (a, b)

    def albedo(self, ab):
        return _texture(self.base, ab[0], ab[1], self.freq, self.phase)

    def sample(self, rng, n):
        a, b = [], []
        while sum(len(x) for x in a) < n:
            aa = rng.uniform(-1, 1, n)
            bb = rng.uniform(-1, 1, n)
            keep = np.hypot(aa, bb) * self.half >= self.hole
            a.append(aa[keep])
            b.append(bb[keep])
        a = np.concatenate(a)[:n]
        b = np.concatenate(b)[:n]
        pts = self.center + self.half * (a[:, None] * self.u + b[:, None] * self.v)
        return pts, np.broadcast_to(self.normal, pts.shape), (a, b)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    base: np.ndarray
    freq: float = 3.0

    @property
    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def _ab(self, n):
        lon = np.arctan2(n[:, 1], n[:, 0]) / np.pi
        lat = np.arcsin(np.clip(n[:, 2], -1, 1)) / (0.5 * np.pi)
        return lon, lat

    def intersect(self, o, d):
        oc = o - self.center
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        s = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - s, -b + s
        t = np.where(t0 > 1e-9, t0, t1)
        ok = (disc > 0) & (t > 1e-9)
        t = np.where(ok, t, np.inf)
        n = (o + np.where(ok, t, 0.0)[:, None] * d - self.center) / self.radius
        return t, n, self._ab(n)

    def albedo(self, ab):
        return _texture(self.base, ab[0], ab[1], self.freq, 0.3)

    def sample(self, rng, n):
        g = rng.normal(size=(n, 3))
        u = g / np.linalg.norm(g, axis=1, keepdims=True)
        return self.center + self.radius * u, u, self._ab(u)


def _shade(albedo, normal, d=None):
    n = normal if d is None else np.where((np.einsum("ij,ij->i", normal, d) > 0)[:, None], -normal, normal)
    return albedo * (AMBIENT + (1 - AMBIENT) * np.maximum(n @ LIGHT, 0.0))[:, None]


def raycast(prims, view: CameraView):
    """Ground-truth (image (H,W,3), camera-z depth (H,W), 0 where the ray misses)."""
    pix = view.pixel_centers()
    d = view.ray_directions(pix)
    o = np.broadcast_to(view.center, d.shape)
    best = np.full(len(d), np.inf)
    color = np.zeros((len(d), 3))
    for p in prims:
        t, n, ab = p.intersect(o, d)
        closer = t < best
        if closer.any():
            best[closer] = t[closer]
            sub = (ab[0][closer], ab[1][closer])
            color[closer] = _shade(p.albedo(sub), n[closer], d[closer])
    hit = np.isfinite(best)
    depth = np.where(hit, np.where(hit, best, 0.0) * (d @ view.axis), 0.0)
    return np.clip(color, 0, 1).reshape(view.height, view.width, 3), depth.reshape(view.height, view.width)


def _slab(z, half, base, freq, phase, hole=0.0):
    return Rect(np.array([0.0, 0.0, z]), np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]),
                np.array([0.0, 1.0, 0.0]), half, np.asarray(base, float), freq, phase, hole)


def _cube(half):
    faces = []
    bases = [(0.85, 0.3, 0.25), (0.25, 0.7, 0.35), (0.3, 0.4, 0.9), (0.9, 0.8, 0.3), (0.75, 0.35, 0.8), (0.35, 0.8, 0.85)]
    for i, (axis, sign) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]):
        n = np.zeros(3)
        n[axis] = sign
        u = np.zeros(3)
        u[(axis + 1) % 3] = 1.0
        v = np.cross(n, u)
        faces.append(Rect(n * half, n, u, v, half, np.array(bases[i]), 2.0, 0.7 * i))
    return faces


def build_primitives(kind: str):
    """(surfaces used for points, surfaces used for images)."""
    if kind == "sphere":
        p = [Sphere(np.zeros(3), 1.0, np.array([0.8, 0.45, 0.3]))]
        return p, p
    if kind == "slab":
        p = [_slab(0.0, 1.0, (0.8, 0.5, 0.3), 2.0, 0.4)]
        return p, p
    if kind == "hole_slab":
        full = _slab(0.0, 1.0, (0.8, 0.5, 0.3), 2.0, 0.4)
        holed = _slab(0.0, 1.0, (0.8, 0.5, 0.3), 2.0, 0.4, hole=0.35)
        return [holed], [full]
    if kind == "two_slabs":
        p = [_slab(0.0, 1.0, (0.3, 0.5, 0.85), 2.0, 1.1), _slab(1.5, 1.0, (0.85, 0.55, 0.25), 2.0, 0.2)]
        return p, p
    if kind == "textured_cube":
        p = _cube(0.5)
        return p, p
    raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")


def _ring_poses(n, radius, elevations, az0=0.0, target=np.zeros(3)):
    poses = []
    for i in range(n):
        az = az0 + 2 * np.pi * i / n
        el = np.radians(elevations[i % len(elevations)])
        eye = target + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(eye, target))
    return poses


def _top_pose(height):
    return look_at(np.array([0.0, 0.0, height]), np.zeros(3), up=(0.0, 1.0, 0.0))


def camera_poses(kind: str, n_views: int, held_out: bool = False):
    """World-to-camera poses and the horizontal field of view (degrees)."""
    if kind in ("sphere", "textured_cube"):
        radius = 3.6 if kind == "sphere" else 2.4
        if held_out:
            return _ring_poses(n_views, radius, (35.0,), az0=np.pi / max(n_views, 1) + 0.1), 45.0
        return _ring_poses(n_views, radius, (20.0, 45.0)), 45.0
    if kind == "two_slabs":
        top = look_at(np.array([0.0, 0.0, 3.0]), np.array([0.0, 0.0, 1.5]), up=(0.0, 1.0, 0.0))
        fov = 60.0
        target = np.array([0.0, 0.0, 0.75])
        if held_out:
            return _ring_poses(n_views, 3.2, (70.0,), az0=0.4, target=target), fov
        return [top] + _ring_poses(n_views - 1, 3.2, (60.0,), target=target), fov
    if held_out:
        return _ring_poses(n_views, 2.8, (65.0,), az0=0.4), 45.0
    return [_top_pose(2.5)] + _ring_poses(n_views - 1, 2.8, (50.0,)), 45.0


@dataclass
class SynthScene:
    kind: str
    field: NeuralPointField
    views: List[CameraView]
    gt_depths: List[np.ndarray]
    held_out: List[CameraView]
    held_out_depths: List[np.ndarray]
    point_spacing: float
    normals: np.ndarray = dc_field(repr=False, default=None)

    def suggested_radius(self) -> float:
        """Kernel/depth search radius giving a handful of neighbors per sample."""
        return 2.0 * self.point_spacing

    def suggested_config(self) -> dict:
        r = self.suggested_radius()
        return {"kernel": {"search_radius": r}, "depth": {"search_radius": r}, "finetune": {"t_dist": r}}


def _make_views(prims, poses, fov, resolution):
    K = intrinsics_from_fov(resolution, resolution, fov)
    views, depths = [], []
    for P in poses:
        v = CameraView(K, P, resolution, resolution)
        img, dep = raycast(prims, v)
        views.append(v.replace(image=img))
        depths.append(dep)
    return views, depths


def synth_scene(kind: str, n_points: int = 5000, n_views: int = 8, resolution: int = 64, seed: int = 0,
                n_held_out: int = 2) -> SynthScene:
    """Deterministic synthetic scene: surface points, training views and held-out views."""
    if n_points < 100:
        raise ValueError("n_points must be >= 100")
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    point_prims, image_prims = build_primitives(kind)
    rng = np.random.default_rng(seed)
    areas = np.array([p.area for p in point_prims])
    if kind == "hole_slab":
        areas = areas - np.pi * point_prims[0].hole**2
    counts = np.floor(n_points * areas / areas.sum()).astype(int)
    counts[: n_points - counts.sum()] += 1
    pos, nrm, col = [], [], []
    for prim, c in zip(point_prims, counts):
        p, n, ab = prim.sample(rng, int(c))
        pos.append(p)
        nrm.append(n)
        col.append(_shade(prim.albedo(ab), n))
    positions = np.concatenate(pos)
    colors = np.clip(np.concatenate(col), 0, 1)
    field = NeuralPointField.from_positions(positions, colors)
    poses, fov = camera_poses(kind, n_views)
    views, depths = _make_views(image_prims, poses, fov, resolution)
    ho_poses, _ = camera_poses(kind, n_held_out, held_out=True) if n_held_out else ([], fov)
    held, held_d = _make_views(image_prims, ho_poses, fov, resolution)
    spacing = float(np.sqrt(areas.sum() / n_points))
    return SynthScene(kind, field, views, depths, held, held_d, spacing, np.concatenate(nrm))


def plane_distance(points: np.ndarray, z: float = 0.0) -> np.ndarray:
    """Distance of points to the horizontal plane at height ``z``."""
    return np.abs(np.asarray(points)[:, 2] - z)
