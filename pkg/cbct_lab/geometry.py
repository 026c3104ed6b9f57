"""
Acquisition geometry for circular-orbit and explicit-vector cone-beam scans.

World frame: isocenter at the origin, rotation about z, millimetres.
A view is described by the source position O^s, the detector center O^d and
the detector pixel basis vectors u (columns) and v (rows), each scaled to
one pixel pitch. Pixel (m, n) sits at x^00 + m*u + n*v.

All functions are pure; vectorized variants take (P, 3) arrays.
"""

from dataclasses import dataclass, field
import math
import numbers

import numpy as np

from cbct_lab.config import PARALLEL_TOL, PLANE_TOL
from cbct_lab.errors import GeometryError


def _vec3(values, name):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def _center_coefficient(size: int) -> float:
    # (w-1)/2 for both odd and even sizes
    return size // 2 + (size + 1) // 2 - (size + 1) / 2


@dataclass(frozen=True)
class ScanConfig:
    """Circular-orbit acquisition parameters. Angles in degrees."""

    n_views: int
    delta_theta: float
    start_angle: float
    source_to_object: float
    object_to_detector: float
    detector_shape: tuple[int, int]
    detector_spacing: tuple[float, float]

    def __post_init__(self):
        if int(self.n_views) != self.n_views or self.n_views < 1:
            raise ValueError(f"n_views must be a positive integer, got {self.n_views}")
        if not self.source_to_object > 0:
            raise ValueError("source_to_object (L^sb) must be > 0")
        if not self.object_to_detector >= 0:
            raise ValueError("object_to_detector (L^bd) must be >= 0")
        w, h = self.detector_shape
        if w < 1 or h < 1:
            raise ValueError(f"detector_shape must be >= 1 pixel, got {self.detector_shape}")
        p_u, p_v = self.detector_spacing
        if not (p_u > 0 and p_v > 0):
            raise ValueError("detector_spacing must be > 0")
        if not 0 <= self.start_angle < 360:
            raise ValueError(f"start_angle must lie in [0, 360), got {self.start_angle}")
        object.__setattr__(self, "detector_shape", (int(w), int(h)))
        object.__setattr__(self, "detector_spacing", (float(p_u), float(p_v)))

    @classmethod
    def uniform(cls, n_views, source_to_object, object_to_detector,
                detector_shape, detector_spacing, start_angle=0.0):
        """Full 360° orbit with delta_theta = 360 / n_views."""
        return cls(n_views=n_views, delta_theta=360.0 / n_views, start_angle=start_angle,
                   source_to_object=source_to_object, object_to_detector=object_to_detector,
                   detector_shape=tuple(detector_shape), detector_spacing=tuple(detector_spacing))

    def angles(self) -> np.ndarray:
        return self.start_angle + self.delta_theta * np.arange(self.n_views)


@dataclass(frozen=True, eq=False)
class ViewPose:
    source: np.ndarray
    detector_center: np.ndarray
    u_basis: np.ndarray
    v_basis: np.ndarray
    normal: np.ndarray
    origin_pixel_center: np.ndarray
    detector_shape: tuple[int, int]

    @classmethod
    def from_vectors(cls, source, detector_center, u_basis, v_basis, detector_shape):
        """Build a pose from raw vectors (circular or manifest-recorded)."""
        source = _vec3(source, "source")
        detector_center = _vec3(detector_center, "detector_center")
        u_basis = _vec3(u_basis, "u_basis")
        v_basis = _vec3(v_basis, "v_basis")
        w, h = (int(s) for s in detector_shape)
        normal = np.cross(u_basis, v_basis)
        if np.linalg.norm(normal) == 0:
            raise GeometryError("u and v detector vectors are parallel")
        origin = (detector_center
                  - _center_coefficient(w) * u_basis
                  - _center_coefficient(h) * v_basis)
        return cls(source, detector_center, u_basis, v_basis, normal, origin, (w, h))

    def as_dict(self) -> dict:
        return {
            "source": self.source.tolist(),
            "detector_center": self.detector_center.tolist(),
            "u": self.u_basis.tolist(),
            "v": self.v_basis.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin, "origin"))
        object.__setattr__(self, "direction", _vec3(self.direction, "direction"))
        if np.linalg.norm(self.direction) == 0:
            raise ValueError("ray direction must be nonzero")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True, eq=False)
class Aabb:
    min_corner: np.ndarray
    max_corner: np.ndarray = field()

    def __post_init__(self):
        lo = _vec3(self.min_corner, "min_corner")
        hi = _vec3(self.max_corner, "max_corner")
        if np.any(lo > hi):
            raise ValueError("min_corner must be <= max_corner componentwise")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def for_grid(cls, shape, spacing):
        """Box spanning the full physical extent of a grid centered on the isocenter."""
        half = 0.5 * np.asarray(shape, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
        return cls(-half, half)


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

def view_pose(cfg: ScanConfig, i: int) -> ViewPose:
    """Pose of view i (1-based) on the circular orbit."""
    if not isinstance(i, numbers.Integral) or not 1 <= i <= cfg.n_views:
        raise IndexError(f"view index must be in 1..{cfg.n_views}, got {i}")
    theta = math.radians(cfg.start_angle + cfg.delta_theta * (i - 1))
    c, s = math.cos(theta), math.sin(theta)
    p_u, p_v = cfg.detector_spacing
    source = [cfg.source_to_object * c, cfg.source_to_object * s, 0.0]
    detector_center = [-cfg.object_to_detector * c, -cfg.object_to_detector * s, 0.0]
    u_basis = [-p_u * s, p_u * c, 0.0]
    v_basis = [0.0, 0.0, p_v]
    return ViewPose.from_vectors(source, detector_center, u_basis, v_basis, cfg.detector_shape)


def circular_poses(cfg: ScanConfig) -> list[ViewPose]:
    return [view_pose(cfg, i) for i in range(1, cfg.n_views + 1)]


def _check_pixel_index(pose: ViewPose, m, n):
    for name, value, size in (("m", m, pose.detector_shape[0]), ("n", n, pose.detector_shape[1])):
        if isinstance(value, bool) or not isinstance(value, numbers.Integral):
            raise TypeError(f"pixel index {name} must be an integer, got {value!r}")
        if not 0 <= value < size:
            raise IndexError(f"pixel index {name}={value} out of range 0..{size - 1}")


def detector_pixel_center(pose: ViewPose, m: int, n: int) -> np.ndarray:
    _check_pixel_index(pose, m, n)
    return pose.origin_pixel_center + m * pose.u_basis + n * pose.v_basis


def detector_pixel_grid(pose: ViewPose) -> np.ndarray:
    """All pixel centers as a (w, h, 3) array indexed [m, n]."""
    w, h = pose.detector_shape
    m = np.arange(w, dtype=np.float64)[:, None, None]
    n = np.arange(h, dtype=np.float64)[None, :, None]
    return pose.origin_pixel_center + m * pose.u_basis + n * pose.v_basis


def ray_through_pixel(pose: ViewPose, m: int, n: int) -> Ray:
    x = detector_pixel_center(pose, m, n)
    return Ray(pose.source, x - pose.source)


# ---------------------------------------------------------------------------
# Ray-AABB (slab method)
# ---------------------------------------------------------------------------

def ray_aabb_intersect_many(origins, directions, box: Aabb):
    """
    Slab intersection for many rays.

    Returns (t_near, t_far, hit) arrays; t_near is clamped to 0. Zero direction
    components are handled as an interval test on the origin.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    origins, directions = np.broadcast_arrays(origins, directions)
    lo, hi = box.min_corner, box.max_corner

    t_near = np.full(origins.shape[0], -np.inf)
    t_far = np.full(origins.shape[0], np.inf)
    inside_all = np.ones(origins.shape[0], dtype=bool)

    for axis in range(3):
        d = directions[:, axis]
        o = origins[:, axis]
        moving = d != 0
        # parallel to this slab: must start within it
        inside_all &= moving | ((o >= lo[axis]) & (o <= hi[axis]))
        safe_d = np.where(moving, d, 1.0)
        t0 = (lo[axis] - o) / safe_d
        t1 = (hi[axis] - o) / safe_d
        t_enter = np.where(moving, np.minimum(t0, t1), -np.inf)
        t_exit = np.where(moving, np.maximum(t0, t1), np.inf)
        t_near = np.maximum(t_near, t_enter)
        t_far = np.minimum(t_far, t_exit)

    t_near = np.maximum(t_near, 0.0)
    hit = inside_all & (t_far >= t_near)
    return t_near, t_far, hit


def ray_aabb_intersect(ray: Ray, box: Aabb):
    """(t_near, t_far) for a hit, None for a miss."""
    t_near, t_far, hit = ray_aabb_intersect_many(ray.origin, ray.direction, box)
    if not hit[0]:
        return None
    return float(t_near[0]), float(t_far[0])


# ---------------------------------------------------------------------------
# Point -> detector projection
# ---------------------------------------------------------------------------

def project_points(pose: ViewPose, points):
    """
    Central projection of (P, 3) points onto the detector plane.

    Returns (x_i (P, 3), t (P,)) with x_i = O^s + t (x - O^s) and
    t = -n.(O^s - O^d) / n.(x - O^s).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = points - pose.source
    n_dot_d = d @ pose.normal
    scale = np.linalg.norm(pose.normal) * np.linalg.norm(d, axis=1)
    if np.any(scale == 0) or np.any(np.abs(n_dot_d) < PARALLEL_TOL * scale):
        raise GeometryError("ray from source to point is parallel to the detector plane")
    t = -(pose.normal @ (pose.source - pose.detector_center)) / n_dot_d
    return pose.source + t[:, None] * d, t


def project_point_to_detector(pose: ViewPose, x):
    x_i, t = project_points(pose, np.asarray(x, dtype=np.float64).reshape(1, 3))
    return x_i[0], float(t[0])


def detector_points_to_pixels(pose: ViewPose, points, check_plane=True) -> np.ndarray:
    """Continuous (m, n) pixel coordinates of (P, 3) points on the detector plane."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    rel = points - pose.origin_pixel_center
    if check_plane:
        unit_n = pose.normal / np.linalg.norm(pose.normal)
        off_plane = np.abs((points - pose.detector_center) @ unit_n)
        scale = np.maximum(1.0, np.linalg.norm(points - pose.source, axis=1))
        if np.any(off_plane > PLANE_TOL * scale):
            raise GeometryError(
                f"point lies {off_plane.max():.3g} mm off the detector plane")
    m = rel @ pose.u_basis / (pose.u_basis @ pose.u_basis)
    n = rel @ pose.v_basis / (pose.v_basis @ pose.v_basis)
    return np.stack([m, n], axis=1)


def detector_point_to_pixel(pose: ViewPose, x_i) -> np.ndarray:
    return detector_points_to_pixels(pose, np.asarray(x_i, dtype=np.float64).reshape(1, 3))[0]


def points_to_pixels(pose: ViewPose, points) -> np.ndarray:
    """Project world points and return their continuous pixel coordinates."""
    x_i, _ = project_points(pose, points)
    return detector_points_to_pixels(pose, x_i, check_plane=False)


def orbit_parameters(poses: list[ViewPose]):
    """
    Recover (angles_deg, L^sb, L^bd) from circular-orbit poses.

    Raises GeometryError when the poses are not a circular orbit about z.
    """
    sources = np.array([p.source for p in poses])
    detectors = np.array([p.detector_center for p in poses])
    if np.any(np.abs(sources[:, 2]) > 1e-9) or np.any(np.abs(detectors[:, 2]) > 1e-9):
        raise GeometryError("poses are not on a circular orbit in the xy-plane")
    radii = np.linalg.norm(sources, axis=1)
    det_radii = np.linalg.norm(detectors, axis=1)
    if np.ptp(radii) > 1e-6 * radii.max() or np.ptp(det_radii) > 1e-6 * max(det_radii.max(), 1.0):
        raise GeometryError("source or detector distance varies across views")
    angles = np.degrees(np.arctan2(sources[:, 1], sources[:, 0])) % 360.0
    return angles, float(radii[0]), float(det_radii[0])
