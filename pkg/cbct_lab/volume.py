"""
Voxel and pixel grids with world-coordinate bookkeeping and interpolation.

Volume.data is a float64 array indexed [c, i, j, k] (channels, x, y, z); the
grid is centered on the isocenter. ImageGrid.data is indexed [c, m, n]
(channels, detector column, detector row). Interpolation uses zero padding:
corners outside the lattice of centers contribute 0.
"""

from dataclasses import dataclass
import numbers

import numpy as np

from cbct_lab.errors import ShapeMismatchError


@dataclass(eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ShapeMismatchError(f"volume data must be (C, W, H, D), got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        self.data = data
        self.spacing = spacing

    @classmethod
    def zeros(cls, shape, spacing, channels=1):
        return cls(np.zeros((channels, *shape)), spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def values(self) -> np.ndarray:
        """The single attenuation channel as a (W, H, D) array."""
        if self.channels != 1:
            raise ShapeMismatchError(f"expected a 1-channel volume, got {self.channels} channels")
        return self.data[0]

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(eq=False)
class ImageGrid:
    """A C-channel raster. stride is the pixel pitch in detector pixels."""

    data: np.ndarray
    stride: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ShapeMismatchError(f"image data must be (C, w, h), got {data.shape}")
        self.data = data

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def values(self) -> np.ndarray:
        if self.channels != 1:
            raise ShapeMismatchError(f"expected a 1-channel image, got {self.channels} channels")
        return self.data[0]


# ---------------------------------------------------------------------------
# Coordinates
# ---------------------------------------------------------------------------

def voxel_center(vol: Volume, idx) -> np.ndarray:
    idx = tuple(idx)
    if len(idx) != 3:
        raise IndexError("voxel index must have 3 components")
    for value, size in zip(idx, vol.shape):
        if isinstance(value, bool) or not isinstance(value, numbers.Integral):
            raise TypeError(f"voxel index must be integer, got {value!r}")
        if not 0 <= value < size:
            raise IndexError(f"voxel index {idx} out of range for shape {vol.shape}")
    shape = np.asarray(vol.shape, dtype=np.float64)
    return (np.asarray(idx, dtype=np.float64) + 0.5 - shape / 2) * np.asarray(vol.spacing)


def voxel_centers(shape, spacing, stride=1) -> np.ndarray:
    """World coordinates of voxel centers at indices {0, stride, ...}: (W/s, H/s, D/s, 3)."""
    axes = [
        (np.arange(0, n, stride, dtype=np.float64) + 0.5 - n / 2) * s
        for n, s in zip(shape, spacing)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack(grid, axis=-1)


def world_to_index(shape, spacing, points) -> np.ndarray:
    """Continuous voxel-index coordinates of world points."""
    shape = np.asarray(shape, dtype=np.float64)
    return np.asarray(points, dtype=np.float64) / np.asarray(spacing) + shape / 2 - 0.5


# ---------------------------------------------------------------------------
# Interpolation weights
# ---------------------------------------------------------------------------

def _linear_corners(coords, shape):
    """
    Corner flat indices and weights for multilinear interpolation.

    coords: (P, d) continuous indices. Returns (idx (P, 2^d), w (P, 2^d)); corners
    outside the grid get weight 0 and index 0.
    """
    coords = np.atleast_2d(coords)
    dims = coords.shape[1]
    base = np.floor(coords)
    frac = coords - base
    base = base.astype(np.int64)
    strides = np.cumprod((1,) + tuple(shape[:0:-1]))[::-1]

    n_corners = 2 ** dims
    idx = np.zeros((coords.shape[0], n_corners), dtype=np.int64)
    weights = np.ones((coords.shape[0], n_corners))
    for corner in range(n_corners):
        valid = np.ones(coords.shape[0], dtype=bool)
        for axis in range(dims):
            bit = (corner >> (dims - 1 - axis)) & 1
            pos = base[:, axis] + bit
            valid &= (pos >= 0) & (pos < shape[axis])
            weights[:, corner] *= frac[:, axis] if bit else 1.0 - frac[:, axis]
            idx[:, corner] += np.clip(pos, 0, shape[axis] - 1) * strides[axis]
        weights[:, corner] = np.where(valid, weights[:, corner], 0.0)
        idx[:, corner] = np.where(valid, idx[:, corner], 0)
    return idx, weights


def trilinear_weights(shape, spacing, points):
    return _linear_corners(world_to_index(shape, spacing, points), tuple(shape))


def bilinear_weights(shape, pixels):
    return _linear_corners(np.asarray(pixels, dtype=np.float64), tuple(shape))


def sample_trilinear_many(vol: Volume, points) -> np.ndarray:
    """Values at (P, 3) world points, returned as (C, P)."""
    idx, w = trilinear_weights(vol.shape, vol.spacing, np.atleast_2d(points))
    flat = vol.data.reshape(vol.channels, -1)
    return np.einsum("cpk,pk->cp", flat[:, idx], w)


def sample_trilinear(vol: Volume, p) -> np.ndarray:
    return sample_trilinear_many(vol, np.asarray(p, dtype=np.float64).reshape(1, 3))[:, 0]


def sample_bilinear_many(img: ImageGrid, pixels) -> np.ndarray:
    idx, w = bilinear_weights(img.shape, np.atleast_2d(pixels))
    flat = img.data.reshape(img.channels, -1)
    return np.einsum("cpk,pk->cp", flat[:, idx], w)


def sample_bilinear(img: ImageGrid, q) -> np.ndarray:
    return sample_bilinear_many(img, np.asarray(q, dtype=np.float64).reshape(1, 2))[:, 0]
