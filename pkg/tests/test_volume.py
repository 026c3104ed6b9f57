import numpy as np
import pytest

from cbct_lab.errors import ShapeMismatchError
from cbct_lab.volume import (
    ImageGrid, Volume, sample_bilinear, sample_trilinear, sample_trilinear_many, voxel_center,
    voxel_centers, world_to_index,
)


def test_voxel_center_is_grid_centered():
    vol = Volume.zeros((4, 4, 4), (1.0, 2.0, 0.5))
    np.testing.assert_allclose(voxel_center(vol, (0, 0, 0)), [-1.5, -3.0, -0.75])
    np.testing.assert_allclose(voxel_center(vol, (3, 3, 3)), [1.5, 3.0, 0.75])


def test_voxel_centers_with_stride():
    centers = voxel_centers((8, 8, 4), (1.0, 1.0, 1.0), stride=2)
    assert centers.shape == (4, 4, 2, 3)
    np.testing.assert_allclose(centers[1, 0, 1], [-1.5, -3.5, 0.5])


def test_world_to_index_inverts_voxel_center():
    vol = Volume.zeros((5, 6, 7), (0.3, 0.4, 0.5))
    for idx in [(0, 0, 0), (4, 5, 6), (2, 3, 1)]:
        np.testing.assert_allclose(world_to_index(vol.shape, vol.spacing, voxel_center(vol, idx)), idx,
                                   atol=1e-12)


def test_voxel_center_index_checks():
    vol = Volume.zeros((2, 2, 2), (1.0, 1.0, 1.0))
    with pytest.raises(IndexError):
        voxel_center(vol, (2, 0, 0))
    with pytest.raises(TypeError):
        voxel_center(vol, (0.5, 0, 0))


def test_trilinear_reproduces_voxel_values(rng):
    vol = Volume(rng.uniform(size=(5, 4, 3)), (1.0, 1.5, 2.0))
    for idx in [(0, 0, 0), (4, 3, 2), (2, 1, 1)]:
        assert sample_trilinear(vol, voxel_center(vol, idx))[0] == pytest.approx(vol.values[idx])


def test_trilinear_is_linear_in_the_data(rng):
    shape, spacing = (6, 6, 6), (1.0, 1.0, 1.0)
    v1, v2 = Volume(rng.normal(size=shape), spacing), Volume(rng.normal(size=shape), spacing)
    a, b = 0.7, -2.3
    combined = Volume(a * v1.values + b * v2.values, spacing)
    points = rng.uniform(-3.5, 3.5, size=(200, 3))
    expected = a * sample_trilinear_many(v1, points) + b * sample_trilinear_many(v2, points)
    np.testing.assert_allclose(sample_trilinear_many(combined, points), expected, rtol=1e-12, atol=1e-12)


def test_trilinear_stays_within_corner_range(rng):
    vol = Volume(rng.uniform(size=(6, 6, 6)), (1.0, 1.0, 1.0))
    for p in rng.uniform(-2.4, 2.4, size=(100, 3)):
        base = np.floor(world_to_index(vol.shape, vol.spacing, p)).astype(int)
        corners = vol.values[base[0]:base[0] + 2, base[1]:base[1] + 2, base[2]:base[2] + 2]
        value = sample_trilinear(vol, p)[0]
        assert corners.min() - 1e-12 <= value <= corners.max() + 1e-12


def test_trilinear_zero_padding():
    vol = Volume(np.ones((4, 4, 4)), (1.0, 1.0, 1.0))
    assert sample_trilinear(vol, [10.0, 0.0, 0.0])[0] == 0.0
    # halfway between the last center (1.5) and the first padded one (2.5)
    assert sample_trilinear(vol, [2.0, 0.0, 0.0])[0] == pytest.approx(0.5)


def test_multichannel_sampling():
    data = np.stack([np.full((2, 2, 2), 1.0), np.full((2, 2, 2), 3.0)])
    vol = Volume(data, (1.0, 1.0, 1.0))
    np.testing.assert_allclose(sample_trilinear(vol, [0.0, 0.0, 0.0]), [1.0, 3.0])


def test_bilinear_midpoint_is_mean():
    img = ImageGrid(np.array([[0.0, 1.0], [2.0, 5.0]]))
    assert sample_bilinear(img, [0.5, 0.5])[0] == pytest.approx(2.0)
    assert sample_bilinear(img, [1.0, 0.0])[0] == pytest.approx(2.0)
    assert sample_bilinear(img, [-1.0, 0.0])[0] == 0.0


def test_volume_validation():
    with pytest.raises(ShapeMismatchError):
        Volume(np.zeros((2, 2)), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ShapeMismatchError):
        Volume(np.zeros((2, 2, 2, 2)), (1.0, 1.0, 1.0)).values


def test_image_grid_promotes_single_channel():
    img = ImageGrid(np.zeros((3, 5)), stride=4)
    assert img.channels == 1 and img.shape == (3, 5) and img.stride == 4
