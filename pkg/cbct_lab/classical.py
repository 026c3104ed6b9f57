"""
Classical reconstruction baselines: FDK and SART.

Both back projections are voxel driven and use the same point-to-detector
path as feature gathering (project_points -> detector_points_to_pixels ->
bilinear read).
"""

from dataclasses import dataclass
import math

import numpy as np
from tqdm import tqdm

from cbct_lab.errors import DivergenceError, GeometryError
from cbct_lab.geometry import orbit_parameters, points_to_pixels
from cbct_lab.projector import ProjectionStack, default_step, projection_matrix
from cbct_lab.volume import ImageGrid, Volume, sample_bilinear_many, voxel_centers

FILTERS = ("ram-lak", "shepp-logan")
VIEW_ORDERS = ("sequential", "shuffled")
DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class FdkOptions:
    filter: str = "ram-lak"
    padding: int = 1

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ValueError(f"filter must be one of {FILTERS}, got {self.filter!r}")
        if self.padding < 1 or self.padding & (self.padding - 1):
            raise ValueError(f"padding must be a power of two >= 1, got {self.padding}")


@dataclass(frozen=True)
class SartOptions:
    iterations: int = 10
    relaxation: float = 0.5
    view_order: str = "sequential"
    seed: int = 0
    nonnegativity: bool = True
    step: float | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.relaxation < 2:
            raise ValueError(f"relaxation must lie in (0, 2), got {self.relaxation}")
        if self.view_order not in VIEW_ORDERS:
            raise ValueError(f"view_order must be one of {VIEW_ORDERS}, got {self.view_order!r}")


# ---------------------------------------------------------------------------
# FDK
# ---------------------------------------------------------------------------

def ramp_kernel(length: int, spacing: float, window: str = "ram-lak") -> np.ndarray:
    """Frequency response of the band-limited ramp filter for a padded row length."""
    n = np.arange(length)
    n = np.where(n < length // 2, n, n - length)
    h = np.zeros(length)
    h[0] = 1.0 / (4.0 * spacing ** 2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (math.pi * n[odd] * spacing) ** 2
    response = np.real(np.fft.fft(h))
    if window == "shepp-logan":
        response *= np.sinc(np.fft.fftfreq(length))
    return response


def filter_rows(image: np.ndarray, spacing: float, opts: FdkOptions) -> np.ndarray:
    """Ramp-filter along the detector u axis (axis 0) with zero padding."""
    w = image.shape[0]
    length = opts.padding * 2 ** int(math.ceil(math.log2(max(2 * w, 2))))
    response = ramp_kernel(length, spacing, opts.filter)
    spectrum = np.fft.fft(image, n=length, axis=0) * response[:, None]
    return np.real(np.fft.ifft(spectrum, axis=0))[:w] * spacing


def _uniform_step(angles: np.ndarray) -> float:
    if len(angles) < 2:
        raise ValueError("FDK needs at least 2 views")
    steps = np.diff(angles) % 360.0
    if not np.allclose(steps, steps[0], atol=1e-6):
        raise GeometryError("FDK needs uniformly spaced view angles")
    return float(steps[0])


def fdk_reconstruct(stack: ProjectionStack, shape, spacing, opts: FdkOptions = FdkOptions(),
                    progress=False) -> Volume:
    """
    Feldkamp filtered back projection for a circular orbit.

    Projections are cosine weighted and ramp filtered on a virtual detector
    through the isocenter, then back projected with the (L^sb / L)^2 distance
    weight and scaled by delta_theta / 2.
    """
    angles, d_so, d_od = orbit_parameters(stack.poses)
    delta = math.radians(_uniform_step(angles))
    magnification = (d_so + d_od) / d_so
    w, h = stack.detector_shape
    pose0 = stack.poses[0]
    du = np.linalg.norm(pose0.u_basis) / magnification
    dv = np.linalg.norm(pose0.v_basis) / magnification
    a = (np.arange(w) - (w - 1) / 2) * du
    b = (np.arange(h) - (h - 1) / 2) * dv
    cosine = d_so / np.sqrt(d_so ** 2 + a[:, None] ** 2 + b[None, :] ** 2)

    points = voxel_centers(shape, spacing).reshape(-1, 3)
    recon = np.zeros(points.shape[0])
    for pose, image in tqdm(list(zip(stack.poses, stack.images)), desc="FDK", disable=not progress):
        filtered = ImageGrid(filter_rows(image.values * cosine, du, opts))
        pixels = points_to_pixels(pose, points)
        axis = pose.source / np.linalg.norm(pose.source)
        distance = d_so - points @ axis
        recon += (d_so / distance) ** 2 * sample_bilinear_many(filtered, pixels)[0]
    return Volume((0.5 * delta * recon).reshape(shape), spacing)


# ---------------------------------------------------------------------------
# SART
# ---------------------------------------------------------------------------

def _safe_inverse(values: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    np.divide(1.0, values, out=out, where=values > 0)
    return out


def view_matrices(stack: ProjectionStack, shape, spacing, step=None, progress=False):
    step = default_step(spacing) if step is None else step
    return [projection_matrix(shape, spacing, pose, step)
            for pose in tqdm(stack.poses, desc="System matrices", disable=not progress)]


def mean_abs_residual(matrices, measured, x) -> float:
    total = sum(np.abs(p - a @ x).sum() for a, p in zip(matrices, measured))
    return float(total / sum(p.size for p in measured))


def sart_iterations(stack: ProjectionStack, shape, spacing, opts: SartOptions = SartOptions(),
                    initial: Volume | None = None, matrices=None, progress=False):
    """
    Run SART and yield (iteration, estimate (W*H*D,), mean absolute residual)
    after every full pass over the views.
    """
    if len(stack) < 1:
        raise ValueError("SART needs at least 1 view")
    if matrices is None:
        matrices = view_matrices(stack, shape, spacing, opts.step, progress=progress)
    measured = [img.values.reshape(-1) for img in stack.images]
    inv_rows = [_safe_inverse(np.asarray(a.sum(axis=1)).ravel()) for a in matrices]
    inv_cols = [_safe_inverse(np.asarray(a.sum(axis=0)).ravel()) for a in matrices]

    x = np.zeros(int(np.prod(shape))) if initial is None else initial.values.reshape(-1).copy()
    initial_residual = mean_abs_residual(matrices, measured, x)
    rng = np.random.default_rng(opts.seed)

    for iteration in tqdm(range(1, opts.iterations + 1), desc="SART", disable=not progress):
        order = np.arange(len(matrices))
        if opts.view_order == "shuffled":
            order = rng.permutation(order)
        for v in order:
            a = matrices[v]
            residual = (measured[v] - a @ x) * inv_rows[v]
            x = x + opts.relaxation * inv_cols[v] * (a.T @ residual)
            if opts.nonnegativity:
                np.maximum(x, 0.0, out=x)
        current = mean_abs_residual(matrices, measured, x)
        if not np.isfinite(current) or (
                initial_residual > 0 and current > DIVERGENCE_FACTOR * initial_residual):
            raise DivergenceError(
                f"SART residual grew from {initial_residual:.4g} to {current:.4g} "
                f"at iteration {iteration}")
        yield iteration, x, current


def sart_reconstruct(stack: ProjectionStack, shape, spacing, opts: SartOptions = SartOptions(),
                     initial: Volume | None = None, matrices=None, progress=False) -> Volume:
    x = np.zeros(int(np.prod(shape))) if initial is None else initial.values.reshape(-1)
    for _, x, _ in sart_iterations(stack, shape, spacing, opts, initial, matrices, progress):
        pass
    return Volume(np.array(x).reshape(shape), spacing)
