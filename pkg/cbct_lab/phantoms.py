"""
Deterministic test phantoms in mm^-1.

Normalized coordinates run from -1 to 1 across each axis of the grid extent.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from cbct_lab.config import ELLIPSOID_MU_RANGE, SPHERE_MU
from cbct_lab.volume import Volume, voxel_centers

PHANTOM_KINDS = ("sphere", "cube", "ellipsoids", "shepp-logan")
DEFAULT_ELLIPSOIDS = 8
SHEPP_LOGAN_SCALE = 0.02

# value, semi-axes (a, b, c), center (x, y, z), rotation about z in degrees
SHEPP_LOGAN_3D = [
    (1.0, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.00, 0.0),
    (-0.8, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.00, 0.0),
    (-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.00, -18.0),
    (-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.00, 18.0),
    (0.1, 0.2100, 0.250, 0.410, 0.00, 0.3500, -0.15, 0.0),
    (0.1, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.25, 0.0),
    (0.1, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.25, 0.0),
    (0.1, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.00, 0.0),
    (0.1, 0.0230, 0.023, 0.020, 0.00, -0.6060, 0.00, 0.0),
    (0.1, 0.0230, 0.046, 0.020, 0.06, -0.6050, 0.00, 0.0),
]


def _normalized_centers(shape, spacing):
    centers = voxel_centers(shape, spacing)
    half = np.asarray(shape, dtype=np.float64) * np.asarray(spacing) / 2
    return centers / half


def _inside(points, center, axes, rotation):
    """points: (..., 3); rotation maps body coordinates to world coordinates."""
    local = (points - center) @ rotation
    return np.sum((local / axes) ** 2, axis=-1) <= 1.0


def sphere(shape, spacing, radius=None, mu=SPHERE_MU) -> Volume:
    """Voxels whose centers lie within radius (mm) of the isocenter get mu."""
    if radius is None:
        radius = 0.3 * min(n * s for n, s in zip(shape, spacing))
    centers = voxel_centers(shape, spacing)
    inside = np.linalg.norm(centers, axis=-1) <= radius
    return Volume(np.where(inside, mu, 0.0), spacing)


def cube(shape, spacing, side, mu=SPHERE_MU) -> Volume:
    """Axis-aligned cube of edge `side` mm centered on the isocenter."""
    centers = voxel_centers(shape, spacing)
    inside = np.all(np.abs(centers) < side / 2, axis=-1)
    return Volume(np.where(inside, mu, 0.0), spacing)


def random_ellipsoids(shape, spacing, k=DEFAULT_ELLIPSOIDS, seed=0,
                      mu_range=ELLIPSOID_MU_RANGE) -> Volume:
    """k randomly placed, sized and rotated ellipsoids; later ones paint over earlier ones."""
    if k < 0:
        raise ValueError("k must be >= 0")
    rng = np.random.default_rng(seed)
    points = _normalized_centers(shape, spacing)
    data = np.zeros(tuple(shape))
    for _ in range(k):
        center = rng.uniform(-0.45, 0.45, size=3)
        axes = rng.uniform(0.12, 0.45, size=3)
        rotation = Rotation.from_euler("zyx", rng.uniform(0.0, 2 * np.pi, size=3)).as_matrix()
        mu = rng.uniform(*mu_range)
        data[_inside(points, center, axes, rotation)] = mu
    return Volume(data, spacing)


def shepp_logan(shape, spacing, scale=SHEPP_LOGAN_SCALE) -> Volume:
    """Additive 3D Shepp-Logan head phantom, values scaled to mm^-1."""
    points = _normalized_centers(shape, spacing)
    data = np.zeros(tuple(shape))
    for value, a, b, c, x0, y0, z0, phi in SHEPP_LOGAN_3D:
        rotation = Rotation.from_euler("z", phi, degrees=True).as_matrix()
        data[_inside(points, np.array([x0, y0, z0]), np.array([a, b, c]), rotation)] += value
    return Volume(scale * data, spacing)


def make_phantom(kind, shape, spacing, seed=0, k=DEFAULT_ELLIPSOIDS, radius=None, side=None,
                 mu=SPHERE_MU) -> Volume:
    if kind == "sphere":
        return sphere(shape, spacing, radius, mu)
    if kind == "cube":
        side = 0.5 * min(n * s for n, s in zip(shape, spacing)) if side is None else side
        return cube(shape, spacing, side, mu)
    if kind == "ellipsoids":
        return random_ellipsoids(shape, spacing, k, seed)
    if kind == "shepp-logan":
        return shepp_logan(shape, spacing)
    raise ValueError(f"phantom kind must be one of {PHANTOM_KINDS}, got {kind!r}")
