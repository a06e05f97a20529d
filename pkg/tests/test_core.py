import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpf.core import (BehindCameraError, CameraView, NeuralPointField, Ray, SceneBounds, bbox_diagonal,
                      generate_rays, intrinsics_from_fov, look_at, project_point, unproject)
from conftest import random_rigid, simple_view


def test_on_axis_point_projects_to_principal_point():
    pix, depth = project_point([0, 0, 2.0], simple_view())
    assert np.allclose(pix, [50, 50])
    assert depth == 2.0


def test_point_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project_point([0, 0, -1.0], simple_view())


def test_project_unproject_round_trip(rng):
    view = CameraView(intrinsics_from_fov(64, 48, 50), look_at([1, 2, 3], [0, 0, 0]), 64, 48)
    for _ in range(1000):
        p = rng.normal(size=3) * 0.5
        pix, d = project_point(p, view)
        q = unproject(pix, d, view)
        assert np.linalg.norm(q - p) <= 1e-9 * max(1.0, np.linalg.norm(p))


def test_center_pixel_ray_is_optical_axis():
    (ray,) = generate_rays(simple_view(), [[50, 50]])
    assert np.allclose(ray.direction, [0, 0, 1])


def test_corner_rays_symmetric():
    rays = generate_rays(simple_view(), [[0, 0], [100, 0], [0, 100], [100, 100]])
    d = np.array([r.direction for r in rays])
    assert np.allclose(d[:, 2], d[0, 2])
    assert np.allclose(d.sum(axis=0)[:2], 0, atol=1e-12)


def test_ray_points_project_back_to_pixel(rng):
    view = CameraView(intrinsics_from_fov(32, 32, 60), look_at([2, -1, 1.5], [0, 0, 0]), 32, 32)
    bounds = SceneBounds(np.zeros(3), 2.0)
    pix = rng.uniform(0, 32, size=(50, 2))
    for p, ray in zip(pix, generate_rays(view, pix, bounds)):
        assert ray is not None
        for t in np.linspace(ray.t_near, ray.t_far, 5)[1:-1]:
            q, _ = project_point(ray.at(t), view)
            assert np.allclose(q, p, atol=1e-8)


def test_rigid_motion_preserves_projections(rng):
    view = CameraView(intrinsics_from_fov(32, 32, 60), look_at([2, -1, 1.5], [0, 0, 0]), 32, 32)
    T = random_rigid(rng)
    moved = CameraView(view.intrinsics, view.world_to_cam @ np.linalg.inv(T), 32, 32)
    pts = rng.normal(size=(200, 3)) * 0.3
    pix, z = view.project(pts)
    pix2, z2 = moved.project(pts @ T[:3, :3].T + T[:3, 3])
    assert np.allclose(pix, pix2, atol=1e-6) and np.allclose(z, z2, atol=1e-6)


def test_field_invariants():
    f = NeuralPointField.from_positions(np.array([[0, 0, 0], [1, 2, 2.0]]), np.array([[0, 0.5, 1], [1, 1, 1]]))
    assert f.scene_scale == pytest.approx(3.0, rel=1e-6)
    assert f.features.shape == (2, 43)
    with pytest.raises(ValueError):
        NeuralPointField(np.zeros((2, 3)), np.full((2, 3), 1.5), np.zeros((2, 8)), np.zeros((2, 32)))
    with pytest.raises(ValueError):
        NeuralPointField(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((1, 8)), np.zeros((2, 32)))
    with pytest.raises(ValueError):
        NeuralPointField(np.zeros((2, 3)), np.zeros((2, 3)), np.full((2, 8), np.nan), np.zeros((2, 32)))
    with pytest.raises(ValueError):
        NeuralPointField.from_positions(np.zeros((0, 3)))


def test_field_edits_bump_revision():
    f = NeuralPointField.from_positions(np.random.default_rng(0).random((5, 3)))
    g = f.with_positions(f.positions + 1)
    assert g.revision != f.revision
    assert not f.positions.flags.writeable


@given(st.lists(st.tuples(*[st.floats(-10, 10)] * 3), min_size=2, max_size=30))
def test_scene_scale_is_bbox_diagonal(pts):
    pts = np.array(pts)
    f = NeuralPointField.from_positions(pts)
    d = bbox_diagonal(pts)
    if d > 0:
        assert f.scene_scale == pytest.approx(d, rel=1e-6)


def test_camera_view_validation():
    K = np.array([[100, 0, 50], [0, 100, 50], [0, 0, 1.0]])
    with pytest.raises(ValueError):
        CameraView(np.diag([-1.0, 100, 1]), np.eye(4), 100, 100)
    with pytest.raises(ValueError):
        CameraView(K, np.diag([1, 1, -1, 1.0]), 100, 100)
    with pytest.raises(ValueError):
        CameraView(np.array([[100, 0, 150], [0, 100, 50], [0, 0, 1.0]]), np.eye(4), 100, 100)


def test_ray_validation():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1, 1, 0.0]), 0, 1)
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1, 0, 0.0]), 2, 1)


def test_look_at_is_rigid():
    M = look_at([3, 1, 2], [0, 0, 0])
    R = M[:3, :3]
    assert np.allclose(R @ R.T, np.eye(3)) and np.isclose(np.linalg.det(R), 1)
    pc = M[:3, :3] @ np.zeros(3) + M[:3, 3]
    assert pc[2] > 0 and np.allclose(pc[:2], 0)
