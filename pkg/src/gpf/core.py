"""Scene types, pinhole projection and ray generation.

Conventions: right-handed world frame; a camera maps world points with
``x_cam = R @ x + t`` (the ``world_to_cam`` 4x4), looks down +z, x to the
right and y down in the image. Pixel coordinates are continuous, so the
center of integer pixel ``(i, j)`` is ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

LOW_DIM = 8
HIGH_DIM = 32
COLOR_DIM = 3
FEATURE_DIM = COLOR_DIM + LOW_DIM + HIGH_DIM

_revisions = itertools.count(1)


class BehindCameraError(ValueError):
    """Raised when a point has non-positive camera-space depth."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def bbox_diagonal(positions: np.ndarray) -> float:
    positions = np.asarray(positions, dtype=np.float64)
    return float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))


@dataclass(frozen=True, eq=False)
class NeuralPointField:
    """Point scaffold with per-point color, low-level and high-level features.

    Instances are immutable; every structural edit produces a new field with
    a fresh ``revision`` so spatial indices built on an older version can be
    detected as stale.
    """

    positions: np.ndarray
    f_c: np.ndarray
    f_l: np.ndarray
    f_h: np.ndarray
    revision: int = field(default=0)

    def __post_init__(self):
        pos = _frozen(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) < 1:
            raise ValueError(f"positions must be (N>=1, 3), got {pos.shape}")
        n = len(pos)
        f_c = _frozen(self.f_c)
        f_l = _frozen(self.f_l)
        f_h = _frozen(self.f_h)
        for name, arr, dim in (("f_c", f_c, COLOR_DIM), ("f_l", f_l, LOW_DIM), ("f_h", f_h, HIGH_DIM)):
            if arr.shape != (n, dim):
                raise ValueError(f"{name} must have shape ({n}, {dim}), got {arr.shape}")
        if not (np.isfinite(pos).all() and np.isfinite(f_l).all() and np.isfinite(f_h).all()):
            raise ValueError("positions and features must be finite")
        if not (np.isfinite(f_c).all() and f_c.min() >= 0.0 and f_c.max() <= 1.0):
            raise ValueError("f_c components must lie in [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "f_c", f_c)
        object.__setattr__(self, "f_l", f_l)
        object.__setattr__(self, "f_h", f_h)
        if self.revision == 0:
            object.__setattr__(self, "revision", next(_revisions))

    @classmethod
    def from_positions(cls, positions, colors=None) -> "NeuralPointField":
        positions = np.asarray(positions, dtype=np.float64)
        n = len(positions)
        if colors is None:
            colors = np.zeros((n, COLOR_DIM))
        return cls(positions, np.clip(colors, 0.0, 1.0), np.zeros((n, LOW_DIM)), np.zeros((n, HIGH_DIM)))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def scene_scale(self) -> float:
        """Bounding-box diagonal; 1.0 for a degenerate single-location cloud."""
        d = bbox_diagonal(self.positions)
        return d if d > 0 else 1.0

    @property
    def features(self) -> np.ndarray:
        """Concatenated ``[f_c | f_l | f_h]`` array of shape (N, 43)."""
        return np.concatenate([self.f_c, self.f_l, self.f_h], axis=1)

    def with_features(self, features: np.ndarray) -> "NeuralPointField":
        features = np.asarray(features, dtype=np.float64)
        c, l = COLOR_DIM, COLOR_DIM + LOW_DIM
        return NeuralPointField(self.positions, np.clip(features[:, :c], 0.0, 1.0), features[:, c:l], features[:, l:])

    def with_positions(self, positions: np.ndarray) -> "NeuralPointField":
        return NeuralPointField(positions, self.f_c, self.f_l, self.f_h)

    def subset(self, keep: np.ndarray) -> "NeuralPointField":
        keep = np.asarray(keep)
        return NeuralPointField(self.positions[keep], self.f_c[keep], self.f_l[keep], self.f_h[keep])

    def concat(self, positions, f_c, f_l, f_h) -> "NeuralPointField":
        return NeuralPointField(
            np.concatenate([self.positions, positions]),
            np.concatenate([self.f_c, np.clip(f_c, 0.0, 1.0)]),
            np.concatenate([self.f_l, f_l]),
            np.concatenate([self.f_h, f_h]),
        )


def _check_pose(world_to_cam: np.ndarray):
    if world_to_cam.shape != (4, 4):
        raise ValueError("world_to_cam must be 4x4")
    R = world_to_cam[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise ValueError("world_to_cam rotation block must be orthonormal with det 1")
    if not np.allclose(world_to_cam[3], [0, 0, 0, 1]):
        raise ValueError("world_to_cam last row must be [0, 0, 0, 1]")


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera with an optional source image and derived products."""

    intrinsics: np.ndarray
    world_to_cam: np.ndarray
    width: int
    height: int
    image: Optional[np.ndarray] = None
    pyramid: Optional[object] = None
    depth_map: Optional[np.ndarray] = None

    def __post_init__(self):
        K = _frozen(self.intrinsics)
        w2c = _frozen(self.world_to_cam)
        if K.shape != (3, 3):
            raise ValueError("intrinsics must be 3x3")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= K[0, 2] <= self.width and 0 <= K[1, 2] <= self.height):
            raise ValueError("principal point must lie inside the image")
        _check_pose(w2c)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "world_to_cam", w2c)
        if self.image is not None:
            img = _frozen(self.image)
            if img.shape != (self.height, self.width, 3):
                raise ValueError(f"image must be ({self.height}, {self.width}, 3), got {img.shape}")
            if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
                raise ValueError("image values must be finite and in [0, 1]")
            object.__setattr__(self, "image", img)
        if self.depth_map is not None:
            d = _frozen(self.depth_map)
            if d.shape != (self.height, self.width):
                raise ValueError("depth_map must be (H, W)")
            object.__setattr__(self, "depth_map", d)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def axis(self) -> np.ndarray:
        """Optical axis (+z of the camera) in world coordinates."""
        return self.rotation[2]

    def replace(self, **changes) -> "CameraView":
        return replace(self, **changes)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """Vectorized projection; returns (pixels (N,2), depths (N,)) without depth checks."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        K = self.intrinsics
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K[0, 0] * pc[..., 0] / z + K[0, 1] * pc[..., 1] / z + K[0, 2]
            v = K[1, 1] * pc[..., 1] / z + K[1, 2]
        return np.stack([u, v], axis=-1), z

    def pixel_centers(self) -> np.ndarray:
        """(H*W, 2) pixel-center coordinates in row-major order."""
        jj, ii = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=1).astype(np.float64)

    def ray_directions(self, pixels: np.ndarray) -> np.ndarray:
        """Unit world-space directions through continuous pixel coordinates."""
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        hom = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
        d_cam = hom @ np.linalg.inv(self.intrinsics).T
        d_world = d_cam @ self.rotation
        return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("ray bounds must satisfy 0 <= t_near < t_far")

    def at(self, t) -> np.ndarray:
        return np.asarray(self.origin) + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


@dataclass(frozen=True)
class SceneBounds:
    """Bounding sphere used for ray near/far limits.

    A sphere around the centroid is used instead of an axis-aligned box so
    that ray limits are unchanged when the scene and cameras move rigidly.
    """

    center: np.ndarray
    radius: float

    @classmethod
    def from_points(cls, positions: np.ndarray, pad: float = 0.0) -> "SceneBounds":
        positions = np.asarray(positions, dtype=np.float64)
        c = positions.mean(axis=0)
        r = float(np.sqrt(((positions - c) ** 2).sum(axis=1).max())) + pad
        return cls(c, max(r, pad, 1e-12))

    def intersect(self, origins: np.ndarray, directions: np.ndarray):
        """Returns (t_near, t_far, hit) for unit-direction rays."""
        oc = np.asarray(origins, dtype=np.float64) - self.center
        b = np.einsum("ij,ij->i", oc, directions)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        hit = disc > 0
        s = np.sqrt(np.where(hit, disc, 0.0))
        t0 = np.maximum(-b - s, 0.0)
        t1 = -b + s
        hit &= t1 > t0
        return np.where(hit, t0, 0.0), np.where(hit, t1, 0.0), hit


def project_point(p, view: CameraView):
    """Project one world point; returns ``(pixel, depth)``.

    Raises:
        BehindCameraError: if the camera-space depth is not positive.
    """
    pc = view.to_camera(np.asarray(p, dtype=np.float64))
    if pc[2] <= 0:
        raise BehindCameraError(f"point has camera depth {pc[2]:.6g} <= 0")
    uvw = view.intrinsics @ pc
    return uvw[:2] / uvw[2], float(pc[2])


def unproject(pixel, depth: float, view: CameraView) -> np.ndarray:
    """Inverse of :func:`project_point`: world point at camera depth ``depth``."""
    uv1 = np.array([pixel[0], pixel[1], 1.0])
    pc = np.linalg.solve(view.intrinsics, uv1) * depth
    return view.rotation.T @ (pc - view.translation)


def generate_rays(view: CameraView, pixels: Sequence, bounds: Optional[SceneBounds] = None) -> list:
    """One ray per (continuous) pixel coordinate.

    Without ``bounds`` rays span ``[0, inf)``. With bounds, near/far come
    from the bounding-sphere intersection and rays that miss the scene are
    returned as ``None``.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if ((pixels < 0) | (pixels > [view.width, view.height])).any():
        raise ValueError("pixels must lie inside the image")
    dirs = view.ray_directions(pixels)
    origin = view.center
    if bounds is None:
        return [Ray(origin, d, 0.0, np.inf) for d in dirs]
    near, far, hit = bounds.intersect(np.broadcast_to(origin, dirs.shape), dirs)
    return [Ray(origin, d, float(n), float(f)) if h else None for d, n, f, h in zip(dirs, near, far, hit)]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera 4x4 for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(f, [1.0, 0.0, 0.0] if abs(f[0]) < 0.9 else [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    return M


def intrinsics_from_fov(width: int, height: int, fov_deg: float) -> np.ndarray:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])


def rigid_transform(points: np.ndarray, T: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ T[:3, :3].T + T[:3, 3]


def bilinear_sample(grid: np.ndarray, pixels: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Sample an (H, W[, C]) array at continuous pixel coordinates.

    ``scale`` maps full-resolution pixel coordinates onto ``grid`` (e.g. 0.25
    for a quarter-resolution map). Coordinates outside the image rectangle
    read as zero; inside, taps are clamped to the border.
    """
    H, W = grid.shape[:2]
    uv = np.asarray(pixels, dtype=np.float64) * scale
    u, v = uv[..., 0], uv[..., 1]
    inside = (u >= 0) & (u <= W) & (v >= 0) & (v <= H)
    x = np.clip(u - 0.5, 0, W - 1)
    y = np.clip(v - 0.5, 0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    if grid.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        inside = inside[..., None]
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return np.where(inside, top * (1 - fy) + bot * fy, 0.0)
