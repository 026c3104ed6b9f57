"""
Configuration constants shared by the library, the CLI and the scripts.
"""

import os

# Workers / chunking
MAX_WORKERS = max(1, (os.cpu_count() or 1) - 1)
CHUNK_RAYS = 1024

# Geometry tolerances
PARALLEL_TOL = 1e-12
PLANE_TOL = 1e-6

# Photon physics
DEFAULT_LOG_EPS = 1e-6
DEFAULT_I0 = 1e5
DEFAULT_I1 = 0.0
NORMAL_APPROX_MEAN = 1e4

# Evaluation
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MU_WATER = 0.02  # mm^-1, display-only HU mapping

# Training (full-scale values where stated, desk-scale otherwise)
LEARNING_RATE = 1e-4
LR_DECAY = 0.5
LR_DECAY_EVERY = 50
EPOCHS = 200
LAMBDA_GRAD = 1.0
LAMBDA_PROJ = 0.01
RAY_BATCH = 256
RAY_BATCH_FULL = 1024
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DOWNSAMPLE = 4
FD_STEP = 1e-3
DESK_LEARNING_RATE = 1e-3
OUTPUT_PRIOR_MU = 0.01  # softplus output bias starts at this attenuation

# Phantoms
ELLIPSOID_MU_RANGE = (0.005, 0.03)
SPHERE_MU = 0.02

# Acquisition presets: volume shape/spacing, detector shape/spacing, distances (mm)
GEOMETRY_PRESETS = {
    "dental": {
        "volume_shape": (256, 256, 256),
        "volume_spacing": (0.3133, 0.3133, 0.3133),
        "detector_shape": (256, 256),
        "detector_spacing": (0.4386, 0.4386),
        "source_to_object": 500.0,
        "object_to_detector": 200.0,
    },
    "spine": {
        "volume_shape": (256, 256, 256),
        "volume_spacing": (2.0, 2.0, 2.0),
        "detector_shape": (256, 256),
        "detector_spacing": (3.0, 3.0),
        "source_to_object": 1000.0,
        "object_to_detector": 500.0,
    },
    "walnut": {
        "volume_shape": (256, 256, 256),
        "volume_spacing": (0.1961, 0.1961, 0.1961),
        "detector_shape": (256, 324),
        "detector_spacing": (0.4488, 0.4488),
        "source_to_object": 66.0,
        "object_to_detector": 133.0,
    },
    # dental scaled down by 8 per axis
    "desk": {
        "volume_shape": (32, 32, 32),
        "volume_spacing": (2.5064, 2.5064, 2.5064),
        "detector_shape": (32, 32),
        "detector_spacing": (3.5088, 3.5088),
        "source_to_object": 500.0,
        "object_to_detector": 200.0,
    },
}

# File naming
PROJECTION_NAME = "proj_{:04d}.raw"
PROJECTION_SIDECAR = "projections.json"
CHECKPOINT_MAGIC = b"CBCTCKPT"
CHECKPOINT_VERSION = 1
