"""
PSNR and SSIM between volumes.

data_range defaults to max - min of the reference volume (the first
argument); every metrics record states that convention.
"""

import math

import numpy as np
import polars as pl
from scipy import ndimage

from cbct_lab.config import SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW
from cbct_lab.errors import ShapeMismatchError
from cbct_lab.volume import Volume

SSIM_MODES = ("slice", "3d")
DATA_RANGE_CONVENTION = "reference max-min"


def _values(x) -> np.ndarray:
    if isinstance(x, Volume):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _pair(a, b):
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"volume shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _data_range(reference, data_range):
    if data_range is None:
        data_range = float(reference.max() - reference.min())
    if not data_range > 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    return float(data_range)


def psnr(a, b, data_range=None) -> float:
    """10 log10(range^2 / MSE) in dB; math.inf when the volumes are identical."""
    a, b = _pair(a, b)
    data_range = _data_range(a, data_range)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def _local_ssim(a, b, sigma, truncate, c1, c2):
    def blur(x):
        return ndimage.gaussian_filter(x, sigma=sigma, truncate=truncate)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range=None, mode="slice", sigma=SSIM_SIGMA, window=SSIM_WINDOW,
         k1=SSIM_K1, k2=SSIM_K2) -> float:
    """
    Mean local SSIM with a Gaussian window.

    mode "slice" filters 2D slices only (sigma 0 along the slicing axis) and
    averages the three slicing directions; mode "3d" uses a 3D window.
    """
    if mode not in SSIM_MODES:
        raise ValueError(f"ssim mode must be one of {SSIM_MODES}, got {mode!r}")
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        return 1.0
    data_range = _data_range(a, data_range)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    truncate = (window // 2) / sigma
    if mode == "3d":
        return _local_ssim(a, b, sigma, truncate, c1, c2)
    scores = []
    for axis in range(a.ndim):
        sigmas = [sigma] * a.ndim
        sigmas[axis] = 0.0
        scores.append(_local_ssim(a, b, sigmas, truncate, c1, c2))
    return float(np.mean(scores))


def metrics_record(case_id, views, reference, estimate, method="", data_range=None) -> dict:
    """One machine-readable evaluation row."""
    ref = _values(reference)
    data_range = _data_range(ref, data_range)
    value = psnr(ref, estimate, data_range)
    return {
        "case_id": str(case_id),
        "method": method,
        "views": int(views) if views is not None else None,
        "psnr": value,
        "psnr_infinite": math.isinf(value),
        "ssim": ssim(ref, estimate, data_range, mode="slice"),
        "ssim_3d": ssim(ref, estimate, data_range, mode="3d"),
        "data_range": data_range,
        "data_range_convention": DATA_RANGE_CONVENTION,
    }


def metrics_frame(records) -> pl.DataFrame:
    return pl.DataFrame(records, schema={
        "case_id": pl.Utf8, "method": pl.Utf8, "views": pl.Int64, "psnr": pl.Float64,
        "psnr_infinite": pl.Boolean, "ssim": pl.Float64, "ssim_3d": pl.Float64,
        "data_range": pl.Float64, "data_range_convention": pl.Utf8,
    })
