import numpy as np
import pytest

from cbct_lab.geometry import ScanConfig, circular_poses
from cbct_lab.network import DecoderConfig, EncoderConfig, ModelConfig
from cbct_lab.training import synthetic_cases

# dental distances, scaled detector
SOURCE_TO_OBJECT = 500.0
OBJECT_TO_DETECTOR = 200.0


def small_scan(n_views, detector_shape=(16, 16), detector_spacing=(2.0, 2.0), start_angle=0.0):
    return ScanConfig.uniform(n_views, SOURCE_TO_OBJECT, OBJECT_TO_DETECTOR, detector_shape,
                              detector_spacing, start_angle)


def tiny_model(level_channels=(4, 4), downsample=2, width=4, residual_blocks=1, strategy="adaptive"):
    return ModelConfig(EncoderConfig(level_channels=level_channels),
                       DecoderConfig.for_downsample(downsample, residual_blocks, width),
                       downsample, strategy)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def dental_scan():
    return ScanConfig.uniform(20, SOURCE_TO_OBJECT, OBJECT_TO_DETECTOR, (256, 256), (0.4386, 0.4386))


@pytest.fixture
def tiny_case():
    """8^3 random-ellipsoid phantom seen from 3 views on a 16^2 detector."""
    poses = circular_poses(small_scan(3))
    return synthetic_cases(1, poses, (8, 8, 8), (2.5, 2.5, 2.5), first_seed=7, k=4)[0]
