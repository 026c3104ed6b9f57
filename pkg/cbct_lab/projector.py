"""
DRR forward projection and photon-count physics.

A ray integral is a midpoint-rule sum of trilinear samples between the
Ray-AABB entry and exit points: samples at t_near + (j + 0.5) * delta with
weight delta, plus one tail sample weighted by the true length of the last
partial interval. Rays are processed in chunks of CHUNK_RAYS.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from tqdm import tqdm

from cbct_lab.config import CHUNK_RAYS, DEFAULT_LOG_EPS, MAX_WORKERS, NORMAL_APPROX_MEAN
from cbct_lab.errors import ShapeMismatchError
from cbct_lab.geometry import Aabb, Ray, ViewPose, detector_pixel_grid, ray_aabb_intersect_many
from cbct_lab.volume import ImageGrid, Volume, trilinear_weights


@dataclass(eq=False)
class ProjectionStack:
    """Per-view attenuation line integrals with their poses."""

    poses: list[ViewPose]
    images: list[ImageGrid]
    rasters: list | None = None

    def __post_init__(self):
        if len(self.poses) != len(self.images):
            raise ShapeMismatchError(
                f"{len(self.poses)} poses but {len(self.images)} projection images")
        shapes = {img.shape for img in self.images}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"projection images differ in shape: {sorted(shapes)}")
        for pose, img in zip(self.poses, self.images):
            if tuple(pose.detector_shape) != img.shape:
                raise ShapeMismatchError(
                    f"image shape {img.shape} does not match detector {pose.detector_shape}")

    def __len__(self):
        return len(self.images)

    @property
    def detector_shape(self) -> tuple[int, int]:
        return self.images[0].shape

    @property
    def array(self) -> np.ndarray:
        """Stacked single-channel projections, (N, w, h)."""
        return np.stack([img.values for img in self.images])


@dataclass(eq=False)
class PhotonRaster:
    """
    Detector counts with flat (I0) and dark (I1) fields.

    counts is float64: integer valued when sampled with noise, the exact
    expectation when noise is disabled.
    """

    counts: np.ndarray
    flat_field: np.ndarray
    dark_field: np.ndarray
    below_dark: int = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        self.flat_field = np.broadcast_to(
            np.asarray(self.flat_field, dtype=np.float64), self.counts.shape).copy()
        self.dark_field = np.broadcast_to(
            np.asarray(self.dark_field, dtype=np.float64), self.counts.shape).copy()
        _check_fields(self.flat_field, self.dark_field)
        self.below_dark = int(np.count_nonzero(self.counts < self.dark_field))


def _check_fields(i0, i1):
    if np.any(i1 < 0):
        raise ValueError("dark field must be >= 0")
    if np.any(i0 <= i1):
        raise ValueError("flat field must exceed the dark field pixelwise")


def default_step(spacing) -> float:
    return 0.5 * float(min(spacing))


# ---------------------------------------------------------------------------
# Ray sampling
# ---------------------------------------------------------------------------

def ray_samples(origins, directions, box: Aabb, step: float):
    """
    Midpoint samples along many rays.

    Returns (ray_ids (M,), points (M, 3), weights (M,)) where weights are the
    segment lengths in mm. Rays missing the box produce no samples.
    """
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    origins, directions = np.broadcast_arrays(origins, directions)
    t_near, t_far, hit = ray_aabb_intersect_many(origins, directions, box)

    norms = np.linalg.norm(directions, axis=1)
    length = np.where(hit, (t_far - t_near) * norms, 0.0)
    n_full = np.floor(length / step).astype(np.int64)
    tail = length - n_full * step
    has_tail = tail > 1e-12 * step
    counts = n_full + has_tail

    ray_ids = np.repeat(np.arange(origins.shape[0]), counts)
    offsets = np.cumsum(counts) - counts
    j = np.arange(ray_ids.size) - offsets[ray_ids]
    is_tail = j >= n_full[ray_ids]
    s = np.where(is_tail, n_full[ray_ids] * step + 0.5 * tail[ray_ids], (j + 0.5) * step)
    weights = np.where(is_tail, tail[ray_ids], step)
    t = t_near[ray_ids] + s / norms[ray_ids]
    points = origins[ray_ids] + t[:, None] * directions[ray_ids]
    return ray_ids, points, weights


def _integrate_rays(vol: Volume, origins, directions, step):
    values = vol.values.reshape(-1)
    box = Aabb.for_grid(vol.shape, vol.spacing)
    n_rays = directions.shape[0]
    out = np.zeros(n_rays)
    for start in range(0, n_rays, CHUNK_RAYS):
        stop = min(start + CHUNK_RAYS, n_rays)
        ray_ids, points, weights = ray_samples(
            origins[start:stop] if origins.shape[0] > 1 else origins,
            directions[start:stop], box, step)
        if ray_ids.size == 0:
            continue
        idx, w = trilinear_weights(vol.shape, vol.spacing, points)
        sampled = np.sum(values[idx] * w, axis=1) * weights
        out[start:stop] = np.bincount(ray_ids, weights=sampled, minlength=stop - start)
    return out


def drr_ray_integral(vol: Volume, ray: Ray, step: float | None = None) -> float:
    step = default_step(vol.spacing) if step is None else step
    return float(_integrate_rays(vol, ray.origin[None], ray.direction[None], step)[0])


def pose_rays(pose: ViewPose):
    """Source origin (1, 3) and per-pixel directions (w*h, 3), pixel order [m, n]."""
    directions = (detector_pixel_grid(pose) - pose.source).reshape(-1, 3)
    return pose.source[None], directions


def render_projection(vol: Volume, pose: ViewPose, shape=None, step=None) -> ImageGrid:
    shape = tuple(pose.detector_shape) if shape is None else tuple(shape)
    if shape != tuple(pose.detector_shape):
        raise ShapeMismatchError(f"requested shape {shape} differs from detector {pose.detector_shape}")
    step = default_step(vol.spacing) if step is None else step
    origins, directions = pose_rays(pose)
    return ImageGrid(_integrate_rays(vol, origins, directions, step).reshape(shape))


def _render_job(args):
    vol, pose, step = args
    return render_projection(vol, pose, step=step)


def render_stack(vol: Volume, poses, step=None, workers=1, progress=False) -> ProjectionStack:
    """Render every view; workers > 1 distributes views over processes."""
    jobs = [(vol, pose, step) for pose in poses]
    if workers > 1 and len(poses) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, MAX_WORKERS)) as executor:
            images = list(tqdm(executor.map(_render_job, jobs), total=len(jobs),
                               desc="Rendering", disable=not progress))
    else:
        images = [_render_job(job) for job in tqdm(jobs, desc="Rendering", disable=not progress)]
    return ProjectionStack(list(poses), images)


# ---------------------------------------------------------------------------
# System matrices
# ---------------------------------------------------------------------------

def projection_matrix(shape, spacing, pose: ViewPose, step=None, rays=None) -> sparse.csr_matrix:
    """
    Sparse DRR operator for one view: (w*h or len(rays), W*H*D).

    rays, when given, is a sequence of flat pixel indices m*h + n selecting rows.
    """
    origins, directions = pose_rays(pose)
    if rays is not None:
        directions = directions[np.asarray(rays, dtype=np.int64)]
    return ray_matrix(shape, spacing, origins, directions, step)


def ray_matrix(shape, spacing, origins, directions, step=None) -> sparse.csr_matrix:
    """Sparse DRR operator for arbitrary rays: one row per direction."""
    step = default_step(spacing) if step is None else step
    box = Aabb.for_grid(shape, spacing)
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n_rays = directions.shape[0]
    n_vox = int(np.prod(shape))

    blocks = []
    for start in range(0, n_rays, CHUNK_RAYS):
        stop = min(start + CHUNK_RAYS, n_rays)
        chunk_origins = origins if origins.shape[0] == 1 else origins[start:stop]
        ray_ids, points, weights = ray_samples(chunk_origins, directions[start:stop], box, step)
        idx, w = trilinear_weights(shape, spacing, points)
        rows = np.repeat(ray_ids, idx.shape[1])
        data = (w * weights[:, None]).reshape(-1)
        keep = data != 0
        block = sparse.coo_matrix((data[keep], (rows[keep], idx.reshape(-1)[keep])),
                                  shape=(stop - start, n_vox)).tocsr()
        block.sum_duplicates()
        blocks.append(block)
    if not blocks:
        return sparse.csr_matrix((0, n_vox))
    return sparse.vstack(blocks, format="csr")


# ---------------------------------------------------------------------------
# Photon physics
# ---------------------------------------------------------------------------

def simulate_photon_counts(proj: ImageGrid, i0, i1, seed=0, noise=True) -> PhotonRaster:
    """
    Beer's law counts: mean = (I0 - I1) exp(-P) + I1.

    The attenuated quanta are Poisson sampled (normal approximation above
    NORMAL_APPROX_MEAN) from a Philox generator keyed by seed; the dark offset
    is added afterwards.
    """
    p = proj.values
    i0 = np.broadcast_to(np.asarray(i0, dtype=np.float64), p.shape)
    i1 = np.broadcast_to(np.asarray(i1, dtype=np.float64), p.shape)
    _check_fields(i0, i1)
    quanta = (i0 - i1) * np.exp(-p)
    if noise:
        rng = np.random.Generator(np.random.Philox(key=seed))
        z = rng.standard_normal(p.shape)
        small = quanta <= NORMAL_APPROX_MEAN
        poisson = rng.poisson(np.where(small, quanta, 0.0)).astype(np.float64)
        normal = np.maximum(np.rint(quanta + np.sqrt(quanta) * z), 0.0)
        quanta = np.where(small, poisson, normal)
    return PhotonRaster(quanta + i1, i0, i1)


def flat_dark_correct(raster: PhotonRaster, eps=DEFAULT_LOG_EPS) -> ImageGrid:
    """P = -ln((I - I1) / (I0 - I1)) with (I - I1) clamped below at eps (I0 - I1)."""
    counts, i0, i1 = raster.counts, raster.flat_field, raster.dark_field
    if counts.shape != i0.shape or counts.shape != i1.shape:
        raise ShapeMismatchError("counts, flat and dark fields must share a shape")
    _check_fields(i0, i1)
    span = i0 - i1
    signal = np.maximum(counts - i1, eps * span)
    return ImageGrid(-np.log(signal / span))
