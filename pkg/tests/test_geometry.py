import numpy as np
import pytest

from cbct_lab.errors import GeometryError
from cbct_lab.geometry import (
    Aabb, Ray, ScanConfig, circular_poses, detector_pixel_center, detector_pixel_grid,
    detector_point_to_pixel, detector_points_to_pixels,
    orbit_parameters, points_to_pixels, project_point_to_detector, ray_aabb_intersect,
    ray_aabb_intersect_many, ray_through_pixel, view_pose,
)

from conftest import small_scan


def test_isocenter_projects_to_detector_center(dental_scan):
    for pose in circular_poses(dental_scan):
        pixel = points_to_pixels(pose, [[0.0, 0.0, 0.0]])[0]
        np.testing.assert_allclose(pixel, [127.5, 127.5], atol=1e-9)


def test_odd_detector_center_is_a_pixel_center():
    pose = view_pose(small_scan(4, detector_shape=(15, 9)), 2)
    np.testing.assert_allclose(detector_pixel_center(pose, 7, 4), pose.detector_center, atol=1e-12)


def test_pixel_round_trip(rng):
    # 200 random geometries x 500 pixels each
    for _ in range(200):
        w, h = rng.integers(1, 300, size=2)
        cfg = ScanConfig.uniform(int(rng.integers(1, 50)), rng.uniform(100, 1000), rng.uniform(0, 500),
                                 (w, h), rng.uniform(0.1, 3.0, size=2), rng.uniform(0, 360))
        pose = view_pose(cfg, int(rng.integers(1, cfg.n_views + 1)))
        m, n = rng.integers(0, w, size=500), rng.integers(0, h, size=500)
        pixels = detector_points_to_pixels(pose, detector_pixel_grid(pose)[m, n])
        np.testing.assert_allclose(pixels, np.stack([m, n], axis=1), atol=1e-9)
    m, n = int(rng.integers(0, w)), int(rng.integers(0, h))
    np.testing.assert_allclose(detector_point_to_pixel(pose, detector_pixel_center(pose, m, n)), [m, n],
                               atol=1e-9)


def test_magnification_of_axial_displacement(dental_scan):
    pose = view_pose(dental_scan, 1)
    dz = 7.3
    x_i, t = project_point_to_detector(pose, [0.0, 0.0, dz])
    assert x_i[2] == pytest.approx(1.4 * dz, rel=1e-9)
    assert t == pytest.approx(1.4, rel=1e-9)


def test_projected_point_lies_on_detector_plane(dental_scan, rng):
    for pose in circular_poses(dental_scan)[:5]:
        x = rng.uniform(-30, 30, size=3)
        x_i, _ = project_point_to_detector(pose, x)
        distance = abs(pose.normal @ (x_i - pose.detector_center)) / np.linalg.norm(pose.normal)
        assert distance <= 1e-9 * np.linalg.norm(x_i - pose.source)


def test_projected_point_lies_on_source_ray(dental_scan):
    pose = view_pose(dental_scan, 3)
    ray = ray_through_pixel(pose, 40, 200)
    x = ray.at(0.6)
    x_i, _ = project_point_to_detector(pose, x)
    np.testing.assert_allclose(detector_point_to_pixel(pose, x_i), [40, 200], atol=1e-9)


def test_parallel_ray_is_degenerate(dental_scan):
    pose = view_pose(dental_scan, 1)
    x = pose.source + np.array([0.0, 10.0, 0.0])
    with pytest.raises(GeometryError):
        project_point_to_detector(pose, x)


def test_off_plane_point_is_rejected(dental_scan):
    pose = view_pose(dental_scan, 1)
    unit = pose.normal / np.linalg.norm(pose.normal)
    with pytest.raises(GeometryError):
        detector_point_to_pixel(pose, pose.detector_center + 1.0 * unit)


def test_circular_pose_invariants(dental_scan):
    for pose in circular_poses(dental_scan):
        assert pose.source[2] == 0.0 and pose.detector_center[2] == 0.0
        assert np.linalg.norm(pose.source) == pytest.approx(500.0, rel=1e-9)
        assert np.linalg.norm(pose.detector_center) == pytest.approx(200.0, rel=1e-9)
        assert abs(pose.u_basis @ pose.v_basis) < 1e-12
        assert np.linalg.norm(np.cross(pose.source, pose.detector_center)) < 1e-9 * 500 * 200
        axis = pose.source - pose.detector_center
        cos = pose.normal @ axis / (np.linalg.norm(pose.normal) * np.linalg.norm(axis))
        assert abs(cos) == pytest.approx(1.0, abs=1e-9)


def test_sparse_orbits_use_wide_steps():
    assert small_scan(5).delta_theta == 72.0
    assert small_scan(10).delta_theta == 36.0
    angles, d_so, d_od = orbit_parameters(circular_poses(small_scan(5, start_angle=10.0)))
    np.testing.assert_allclose(angles, [10, 82, 154, 226, 298], atol=1e-9)
    assert (d_so, d_od) == pytest.approx((500.0, 200.0))


@pytest.mark.parametrize("index", [0, 6, -1])
def test_view_index_out_of_range(index):
    with pytest.raises(IndexError):
        view_pose(small_scan(5), index)


def test_pixel_index_checks():
    pose = view_pose(small_scan(2), 1)
    with pytest.raises(IndexError):
        detector_pixel_center(pose, 16, 0)
    with pytest.raises(TypeError):
        detector_pixel_center(pose, 1.5, 0)


@pytest.mark.parametrize("kwargs", [
    {"n_views": 0}, {"source_to_object": 0.0}, {"object_to_detector": -1.0},
    {"start_angle": 360.0}, {"detector_shape": (0, 4)}, {"detector_spacing": (0.0, 1.0)},
])
def test_invalid_scan_config(kwargs):
    values = dict(n_views=4, delta_theta=90.0, start_angle=0.0, source_to_object=500.0,
                  object_to_detector=200.0, detector_shape=(8, 8), detector_spacing=(1.0, 1.0))
    values.update(kwargs)
    with pytest.raises(ValueError):
        ScanConfig(**values)


def test_ray_aabb_boundary_cases():
    box = Aabb([-1, -1, -1], [1, 1, 1])
    assert ray_aabb_intersect(Ray([0, 0, 0], [1, 0, 0]), box) == pytest.approx((0.0, 1.0))
    assert ray_aabb_intersect(Ray([-5, 0, 0], [1, 0, 0]), box) == pytest.approx((4.0, 6.0))
    assert ray_aabb_intersect(Ray([-5, 0, 0], [-1, 0, 0]), box) is None
    # parallel to the x slabs but outside them
    assert ray_aabb_intersect(Ray([2, 0, -5], [0, 0, 1]), box) is None
    assert ray_aabb_intersect(Ray([0.5, 0.5, -5], [0, 0, 2]), box) == pytest.approx((2.0, 3.0))


@pytest.mark.parametrize("n_rays", [1000, pytest.param(10_000, marks=pytest.mark.slow)])
def test_ray_aabb_matches_brute_force_marcher(rng, n_rays):
    dt = 1e-3
    ts = np.arange(0.0, 12.0, dt) + 0.5 * dt
    lo = rng.uniform(-2, 0, size=(n_rays, 3))
    hi = lo + rng.uniform(0.5, 2.0, size=(n_rays, 3))
    origins = rng.uniform(-3, 3, size=(n_rays, 3))
    directions = rng.normal(size=(n_rays, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    for r in range(n_rays):
        box = Aabb(lo[r], hi[r])
        t_near, t_far, hit = ray_aabb_intersect_many(origins[r], directions[r], box)
        points = origins[r] + ts[:, None] * directions[r]
        inside = np.all((points >= lo[r]) & (points <= hi[r]), axis=1)
        if inside.any():
            assert hit[0]
            assert t_near[0] == pytest.approx(ts[inside][0], abs=dt)
            assert t_far[0] == pytest.approx(ts[inside][-1], abs=dt)
        elif hit[0]:
            # grazing hits shorter than one marcher step
            assert t_far[0] - t_near[0] < dt


def test_aabb_rejects_inverted_corners():
    with pytest.raises(ValueError):
        Aabb([1, 0, 0], [0, 1, 1])


def test_ray_rejects_zero_direction():
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [0, 0, 0])
