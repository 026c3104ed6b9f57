"""
Desk-scale learning trend: a small model trained on random ellipsoids should
beat FDK at the same sparse view count and reduce its loss for every seed.

Multi-minute; deselect with -m "not slow".
"""

import numpy as np
import pytest

from cbct_lab.classical import fdk_reconstruct
from cbct_lab.config import DESK_LEARNING_RATE
from cbct_lab.manifest import preset_manifest
from cbct_lab.metrics import psnr
from cbct_lab.network import DecoderConfig, EncoderConfig, ModelConfig, init_model_state, predict
from cbct_lab.training import TrainConfig, evaluate_loss, projection_stats, synthetic_cases, train

pytestmark = pytest.mark.slow

TRAIN_CASES = 40
HELD_OUT = 8
VIEWS = 10
STEPS = 200
DOWNSAMPLE = 4


@pytest.fixture(scope="module")
def desk():
    manifest = preset_manifest("desk", VIEWS)
    shape, spacing = manifest.volume_shape, manifest.volume_spacing
    poses = manifest.poses()
    training = synthetic_cases(TRAIN_CASES, poses, shape, spacing, first_seed=0)
    held_out = synthetic_cases(HELD_OUT, poses, shape, spacing, first_seed=10_000)
    mean, std = projection_stats(training)
    model_cfg = ModelConfig(EncoderConfig(), DecoderConfig.for_downsample(DOWNSAMPLE), DOWNSAMPLE,
                            "adaptive", mean, std)
    assert model_cfg.encoder.channels == 56
    return training, held_out, model_cfg


@pytest.fixture(scope="module")
def trained(desk):
    runs = {}

    def run(seed):
        if seed not in runs:
            training, _, model_cfg = desk
            train_cfg = TrainConfig(lr=DESK_LEARNING_RATE, seed=seed)
            initial = init_model_state(model_cfg, seed)
            state, history = train(training, model_cfg, train_cfg, state=initial, max_steps=STEPS)
            assert len(history) == STEPS
            runs[seed] = initial, state, train_cfg
        return runs[seed]
    return run


def test_model_beats_fdk_on_held_out_phantoms(desk, trained):
    _, held_out, model_cfg = desk
    _, state, _ = trained(0)
    gains = []
    for case in held_out:
        shape, spacing = case.gt.shape, case.gt.spacing
        model = predict(case.projections, shape, spacing, model_cfg, state)
        fdk = fdk_reconstruct(case.projections, shape, spacing)
        gains.append(psnr(case.gt, model) - psnr(case.gt, fdk))
    assert np.mean(gains) >= 1.0, gains


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_falls_for_every_seed(desk, trained, seed):
    training, _, model_cfg = desk
    initial, state, train_cfg = trained(seed)
    sample = training[:4]
    before = [evaluate_loss(case, initial, model_cfg, train_cfg, seed=seed).total for case in sample]
    after = [evaluate_loss(case, state, model_cfg, train_cfg, seed=seed).total for case in sample]
    assert np.mean(after) < np.mean(before)
