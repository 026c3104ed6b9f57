"""
Feature back projection and adaptive multi-view fusion.

A 3D query point is projected onto every view's detector, the view's 2D
feature maps are read bilinearly at that pixel (one read per pyramid level,
pixel coordinates divided by the level stride) and the per-view vectors are
fused into one C-dimensional feature. For a fixed geometry each read is a
constant sparse matrix, so gathering is linear in the feature maps and
differentiable through autograd.sparse_matmul.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from cbct_lab.autograd import Tensor, as_tensor, concat, gelu, softmax, sparse_matmul
from cbct_lab.errors import ShapeMismatchError
from cbct_lab.geometry import ViewPose, points_to_pixels
from cbct_lab.volume import ImageGrid, bilinear_weights, sample_bilinear, voxel_centers

STRATEGIES = ("adaptive", "mean", "max")


@dataclass(eq=False)
class FusionParams:
    """phi1: 3C -> C+1 (GELU on the first C outputs), phi2: C -> C (GELU)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        c = self.w2.shape[0]
        expected = {"w1": (3 * c, c + 1), "b1": (c + 1,), "w2": (c, c), "b2": (c,)}
        for name, shape in expected.items():
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.shape != shape:
                raise ShapeMismatchError(f"fusion {name} must be {shape}, got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"fusion {name} must be finite")
            setattr(self, name, value)

    @property
    def channels(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def init(cls, channels, seed=0):
        rng = np.random.default_rng(seed)

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        c = channels
        return cls(uniform(3 * c, (3 * c, c + 1)), uniform(3 * c, (c + 1,)),
                   uniform(c, (c, c)), uniform(c, (c,)))


@dataclass(eq=False)
class FeatureVolume:
    data: np.ndarray  # (C, W/S, H/S, D/S)
    stride: int
    spacing: tuple[float, float, float]

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


def check_downsample(shape, stride):
    if stride < 1 or stride & (stride - 1):
        raise ValueError(f"downsampling rate must be a power of two, got {stride}")
    if any(n % stride for n in shape):
        raise ShapeMismatchError(f"downsampling rate {stride} does not divide volume shape {shape}")


def query_points(shape, spacing, stride) -> np.ndarray:
    """Voxel centers at indices {0, S, 2S, ...} per axis, flattened to (P, 3)."""
    check_downsample(shape, stride)
    return voxel_centers(shape, spacing, stride).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Gathering
# ---------------------------------------------------------------------------

def gather_view_features(feature_map: ImageGrid, pose: ViewPose, x) -> np.ndarray:
    pixel = points_to_pixels(pose, np.asarray(x, dtype=np.float64).reshape(1, 3))[0]
    return sample_bilinear(feature_map, pixel / feature_map.stride)


def gather_matrix(pose: ViewPose, points, map_shape, stride=1.0) -> sparse.csr_matrix:
    """Sparse (P, w*h) bilinear read of a map with the given stride at projected points."""
    pixels = points_to_pixels(pose, points) / stride
    idx, w = bilinear_weights(map_shape, pixels)
    rows = np.repeat(np.arange(pixels.shape[0]), idx.shape[1])
    n_pixels = int(np.prod(map_shape))
    return sparse.csr_matrix((w.reshape(-1), (rows, idx.reshape(-1))),
                             shape=(pixels.shape[0], n_pixels))


def gather_plan(poses, points, level_shapes, level_strides):
    """matrices[view][level] for a fixed geometry and query set."""
    return [[gather_matrix(pose, points, shape, stride)
             for shape, stride in zip(level_shapes, level_strides)]
            for pose in poses]


def gather_levels(levels: list[Tensor], plan) -> Tensor:
    """
    levels[l]: (N, C_l, w_l, h_l) feature pyramids for N views.
    Returns (N, P, C) with the level features concatenated per point.
    """
    per_view = []
    for v, matrices in enumerate(plan):
        parts = []
        for level, matrix in zip(levels, matrices):
            n, c, w, h = level.shape
            flat = level[v].transpose(1, 2, 0).reshape(w * h, c)
            parts.append(sparse_matmul(matrix, flat))
        gathered = concat(parts, axis=1)
        per_view.append(gathered.reshape(1, *gathered.shape))
    return concat(per_view, axis=0)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def fuse_tensor(features: Tensor, w1, b1, w2, b2, strategy="adaptive"):
    """
    Fuse (N, P, C) per-view features into (P, C).

    Returns (fused, weights); weights is the (N, P, 1) softmax over views for
    the adaptive strategy and None otherwise.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"fusion strategy must be one of {STRATEGIES}, got {strategy!r}")
    n, p, c = features.shape
    if w2.shape[0] != c:
        raise ShapeMismatchError(f"features have {c} channels, fusion expects {w2.shape[0]}")
    weights = None
    if strategy == "adaptive":
        mu = features.mean(axis=0, keepdims=True)
        var = (features - mu).square().mean(axis=0, keepdims=True)
        zeros = Tensor(np.zeros(features.shape))
        hidden = concat([features, mu + zeros, var + zeros], axis=2) @ w1 + b1
        per_view = gelu(hidden[:, :, :c])
        weights = softmax(hidden[:, :, c:], axis=0)
        pooled = (weights * per_view).sum(axis=0)
    elif strategy == "mean":
        pooled = features.mean(axis=0)
    else:
        pooled = features.max(axis=0)
    return gelu(pooled @ w2 + b2), weights


def _params_tensors(params: FusionParams):
    return [as_tensor(params.w1), as_tensor(params.b1), as_tensor(params.w2), as_tensor(params.b2)]


def _stack_features(features) -> np.ndarray:
    if len(features) == 0:
        raise ValueError("at least one view feature is required")
    stacked = np.stack([np.asarray(f, dtype=np.float64) for f in features])
    return stacked.reshape(stacked.shape[0], -1, stacked.shape[-1])


def fuse_mean_var(features):
    """Element-wise mean and population variance (1/N) over views."""
    stacked = _stack_features(features)
    mu = stacked.mean(axis=0)
    var = ((stacked - mu) ** 2).mean(axis=0)
    shape = np.asarray(features[0]).shape
    return mu.reshape(shape), var.reshape(shape)


def fuse_adaptive(features, params: FusionParams, return_weights=False):
    """Adaptive fusion of per-view feature vectors (each (C,) or (P, C))."""
    stacked = _stack_features(features)
    fused, weights = fuse_tensor(Tensor(stacked), *_params_tensors(params))
    shape = np.asarray(features[0]).shape
    fused = fused.data.reshape(shape)
    if return_weights:
        return fused, weights.data[:, :, 0].reshape((len(features),) + shape[:-1])
    return fused


def _as_pyramid(view_maps):
    if isinstance(view_maps, ImageGrid):
        return [view_maps]
    return list(view_maps)


def build_feature_volume(feature_maps, poses, shape, spacing, stride, params: FusionParams,
                         strategy="adaptive") -> FeatureVolume:
    """
    Assemble the (C, W/S, H/S, D/S) feature volume.

    feature_maps holds one ImageGrid (or a list of pyramid levels) per view.
    """
    if len(feature_maps) != len(poses):
        raise ShapeMismatchError(f"{len(feature_maps)} feature maps for {len(poses)} poses")
    points = query_points(shape, spacing, stride)
    pyramids = [_as_pyramid(m) for m in feature_maps]
    level_shapes = [g.shape for g in pyramids[0]]
    level_strides = [g.stride for g in pyramids[0]]
    plan = gather_plan(poses, points, level_shapes, level_strides)
    levels = [Tensor(np.stack([pyr[l].data for pyr in pyramids])) for l in range(len(level_shapes))]
    gathered = gather_levels(levels, plan)
    fused, _ = fuse_tensor(gathered, *_params_tensors(params), strategy=strategy)
    coarse = tuple(n // stride for n in shape)
    data = fused.data.T.reshape((fused.shape[1],) + coarse)
    return FeatureVolume(data, stride, tuple(spacing))
