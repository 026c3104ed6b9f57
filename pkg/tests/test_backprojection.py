import itertools

import numpy as np
import pytest

from cbct_lab.autograd import Tensor, parameter
from cbct_lab.backprojection import (
    FusionParams, build_feature_volume, check_downsample, fuse_adaptive, fuse_mean_var, fuse_tensor,
    gather_matrix, gather_view_features, query_points,
)
from cbct_lab.errors import ShapeMismatchError
from cbct_lab.geometry import circular_poses, points_to_pixels, ray_through_pixel, view_pose
from cbct_lab.volume import ImageGrid, sample_bilinear

from conftest import small_scan


def test_one_hot_feature_is_read_back_along_its_ray():
    pose = view_pose(small_scan(4, detector_shape=(16, 12)), 3)
    m, n, channel = 5, 7, 2
    data = np.zeros((4, 16, 12))
    data[channel, m, n] = 1.0
    ray = ray_through_pixel(pose, m, n)
    for t in (0.6, 0.7, 0.75):
        features = gather_view_features(ImageGrid(data), pose, ray.at(t))
        np.testing.assert_allclose(features, np.eye(4)[channel], atol=1e-9)


def test_strided_maps_are_read_at_scaled_pixels():
    pose = view_pose(small_scan(2), 1)
    rng = np.random.default_rng(0)
    level = ImageGrid(rng.normal(size=(3, 4, 4)), stride=4)
    x = np.array([3.0, -2.0, 4.0])
    pixel = points_to_pixels(pose, x[None])[0]
    np.testing.assert_allclose(gather_view_features(level, pose, x), sample_bilinear(level, pixel / 4))


def test_gather_matrix_matches_point_reads(rng):
    pose = view_pose(small_scan(3), 2)
    image = ImageGrid(rng.normal(size=(1, 16, 16)))
    points = rng.uniform(-8, 8, size=(20, 3))
    matrix = gather_matrix(pose, points, image.shape)
    expected = np.array([gather_view_features(image, pose, p)[0] for p in points])
    np.testing.assert_allclose(matrix @ image.values.reshape(-1), expected, atol=1e-12)


def test_mean_and_population_variance():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([3.0, 2.0, -1.0])
    mu, var = fuse_mean_var([a, b])
    np.testing.assert_allclose(mu, [2.0, 2.0, 1.0])
    np.testing.assert_allclose(var, [1.0, 0.0, 4.0])


def test_fusion_weights_sum_to_one(rng):
    params = FusionParams.init(6, seed=1)
    features = [rng.normal(size=(10, 6)) for _ in range(4)]
    _, weights = fuse_adaptive(features, params, return_weights=True)
    assert weights.shape == (4, 10)
    assert np.all(weights > 0)
    np.testing.assert_allclose(weights.sum(axis=0), 1.0, atol=1e-12)


def test_single_view_weight_is_exactly_one(rng):
    params = FusionParams.init(5, seed=2)
    _, weights = fuse_adaptive([rng.normal(size=5)], params, return_weights=True)
    assert np.all(weights == 1.0)


@pytest.mark.parametrize("n", [2, 3, 5])
def test_identical_views_fuse_like_a_single_view(rng, n):
    params = FusionParams.init(6, seed=5)
    features = rng.normal(size=(7, 6))
    fused, weights = fuse_adaptive([features] * n, params, return_weights=True)
    np.testing.assert_allclose(weights, 1.0 / n, atol=1e-12)
    np.testing.assert_allclose(fused, fuse_adaptive([features], params), atol=1e-12)


def test_fusion_is_permutation_invariant(rng):
    params = FusionParams.init(8, seed=3)
    features = [rng.normal(size=(7, 8)) for _ in range(4)]
    reference = fuse_adaptive(features, params)
    for order in itertools.permutations(range(4)):
        np.testing.assert_allclose(fuse_adaptive([features[i] for i in order], params), reference,
                                   rtol=1e-6, atol=1e-12)


def test_fusion_gradients_match_finite_differences(rng):
    c, n, p = 4, 3, 5
    params = FusionParams.init(c, seed=4)
    arrays = {"x": rng.normal(size=(n, p, c)), "w1": params.w1.copy(), "b1": params.b1.copy(),
              "w2": params.w2.copy(), "b2": params.b2.copy()}

    def loss(values):
        fused, _ = fuse_tensor(values["x"], values["w1"], values["b1"], values["w2"], values["b2"])
        return fused.square().sum()

    tensors = {k: parameter(v) for k, v in arrays.items()}
    loss(tensors).backward()
    h = 1e-5
    for name, array in arrays.items():
        for index in range(0, array.size, max(1, array.size // 8)):
            original = array.flat[index]
            array.flat[index] = original + h
            plus = loss({k: Tensor(v) for k, v in arrays.items()}).item()
            array.flat[index] = original - h
            minus = loss({k: Tensor(v) for k, v in arrays.items()}).item()
            array.flat[index] = original
            numeric = (plus - minus) / (2 * h)
            analytic = tensors[name].grad.flat[index]
            assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8)


@pytest.mark.parametrize("strategy", ["mean", "max"])
def test_baseline_strategies(strategy, rng):
    params = FusionParams.init(3, seed=0)
    features = rng.normal(size=(4, 2, 3))
    fused, weights = fuse_tensor(Tensor(features), Tensor(params.w1), Tensor(params.b1),
                                 Tensor(params.w2), Tensor(params.b2), strategy)
    pooled = features.mean(axis=0) if strategy == "mean" else features.max(axis=0)
    expected, _ = fuse_tensor(Tensor(pooled[None]), Tensor(params.w1), Tensor(params.b1),
                              Tensor(params.w2), Tensor(params.b2), "mean")
    assert weights is None
    np.testing.assert_allclose(fused.data, expected.data, atol=1e-12)


def test_unknown_strategy():
    params = FusionParams.init(2)
    with pytest.raises(ValueError):
        fuse_tensor(Tensor(np.zeros((1, 1, 2))), params.w1, params.b1, params.w2, params.b2, "median")


def test_fusion_params_shape_check():
    with pytest.raises(ShapeMismatchError):
        FusionParams(np.zeros((6, 3)), np.zeros(3), np.zeros((2, 2)), np.zeros(2))


def test_feature_volume_layout(rng):
    poses = circular_poses(small_scan(3))
    maps = [ImageGrid(rng.normal(size=(5, 16, 16))) for _ in poses]
    fv = build_feature_volume(maps, poses, (8, 8, 8), (2.5, 2.5, 2.5), 4, FusionParams.init(5))
    assert fv.data.shape == (5, 2, 2, 2)
    assert fv.stride == 4 and fv.channels == 5


def test_feature_volume_cells_follow_query_points(rng):
    poses = circular_poses(small_scan(2))
    params = FusionParams.init(3, seed=9)
    maps = [ImageGrid(rng.normal(size=(3, 16, 16))) for _ in poses]
    shape, spacing = (8, 8, 8), (2.5, 2.5, 2.5)
    fv = build_feature_volume(maps, poses, shape, spacing, 2, params)
    points = query_points(shape, spacing, 2)
    k = 13
    per_view = [gather_view_features(m, pose, points[k]) for m, pose in zip(maps, poses)]
    cell = np.unravel_index(k, fv.shape)
    np.testing.assert_allclose(fv.data[(slice(None),) + cell], fuse_adaptive(per_view, params), atol=1e-12)


def test_downsample_must_divide_and_be_power_of_two():
    with pytest.raises(ShapeMismatchError):
        check_downsample((12, 12, 10), 4)
    with pytest.raises(ValueError):
        check_downsample((12, 12, 12), 3)
    check_downsample((12, 12, 12), 4)
