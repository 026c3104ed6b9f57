"""
Desk-scale encoder / fusion / decoder built on cbct_lab.autograd.

Encoder: per level a stride-2 3x3 convolution followed by a residual 3x3
convolution, GELU activations, weights shared across views. Level l has
stride 2^l; gathers concatenate all levels.
Decoder: 3x3x3 input convolution, residual blocks, log2(S) blocks of
nearest x2 upsampling + convolution, and a 1x1x1 projection with softplus.
"""

from dataclasses import asdict, dataclass, field
import math

import numpy as np

from cbct_lab.autograd import Tensor, conv, gelu, parameter, softplus, upsample_nearest
from cbct_lab.backprojection import (
    FeatureVolume, FusionParams, STRATEGIES, check_downsample, fuse_tensor, gather_levels,
    gather_plan, query_points,
)
from cbct_lab.config import DOWNSAMPLE, OUTPUT_PRIOR_MU
from cbct_lab.errors import ShapeMismatchError
from cbct_lab.projector import ProjectionStack
from cbct_lab.volume import ImageGrid, Volume


@dataclass(frozen=True)
class EncoderConfig:
    levels: int = 3
    base_channels: int = 8
    stride: int = 2
    level_channels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.level_channels is not None:
            object.__setattr__(self, "level_channels", tuple(int(c) for c in self.level_channels))
            object.__setattr__(self, "levels", len(self.level_channels))
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("encoder needs at least one level and one channel")
        if self.stride != 2:
            raise ValueError("encoder levels downsample by 2")

    @classmethod
    def full_scale(cls):
        return cls(level_channels=(32, 32, 64, 128))

    @property
    def channels_per_level(self) -> tuple[int, ...]:
        if self.level_channels is not None:
            return self.level_channels
        return tuple(self.base_channels * 2 ** l for l in range(self.levels))

    @property
    def channels(self) -> int:
        return sum(self.channels_per_level)

    def level_strides(self) -> list[int]:
        return [self.stride ** (l + 1) for l in range(self.levels)]

    def level_shapes(self, detector_shape) -> list[tuple[int, int]]:
        shapes, current = [], tuple(detector_shape)
        for _ in range(self.levels):
            current = tuple((n - 1) // self.stride + 1 for n in current)
            shapes.append(current)
        return shapes


@dataclass(frozen=True)
class DecoderConfig:
    residual_blocks: int = 2
    upsample_blocks: int = 2
    width: int = 8

    def __post_init__(self):
        if self.residual_blocks < 0 or self.upsample_blocks < 0 or self.width < 1:
            raise ValueError("invalid decoder configuration")

    @classmethod
    def for_downsample(cls, downsample, residual_blocks=2, width=8):
        check_downsample((downsample,), downsample)
        return cls(residual_blocks, int(round(math.log2(downsample))), width)

    @property
    def scale(self) -> int:
        return 2 ** self.upsample_blocks


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    downsample: int = DOWNSAMPLE
    strategy: str = "adaptive"
    norm_mean: float = 0.0
    norm_std: float = 1.0

    def __post_init__(self):
        if self.decoder.scale != self.downsample:
            raise ValueError(
                f"decoder has {self.decoder.upsample_blocks} upsampling blocks, "
                f"downsampling rate {self.downsample} needs log2(S)")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"fusion strategy must be one of {STRATEGIES}")
        if not self.norm_std > 0:
            raise ValueError("norm_std must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict):
        values = dict(values)
        encoder = dict(values.pop("encoder"))
        if encoder.get("level_channels") is not None:
            encoder["level_channels"] = tuple(encoder["level_channels"])
        return cls(EncoderConfig(**encoder), DecoderConfig(**values.pop("decoder")), **values)


@dataclass(eq=False)
class ModelState:
    """Named parameters with Adam moment buffers and a step counter."""

    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, value in self.params.items():
            self.m.setdefault(name, np.zeros_like(value))
            self.v.setdefault(name, np.zeros_like(value))
            if self.m[name].shape != value.shape or self.v[name].shape != value.shape:
                raise ShapeMismatchError(f"moment buffers for {name} do not match its shape")

    def copy(self) -> "ModelState":
        return ModelState({k: p.copy() for k, p in self.params.items()},
                          {k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()}, self.step)

    def tensors(self) -> dict[str, Tensor]:
        return {name: parameter(value, name) for name, value in self.params.items()}

    def fusion_params(self) -> FusionParams:
        p = self.params
        return FusionParams(p["fusion.w1"], p["fusion.b1"], p["fusion.w2"], p["fusion.b2"])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params.values())


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model_state(cfg: ModelConfig, seed=0) -> ModelState:
    """
    Fan-in scaled uniform initialization. The output bias is the inverse
    softplus of OUTPUT_PRIOR_MU so an untrained decoder predicts tissue-like
    attenuation.
    """
    rng = np.random.default_rng(seed)
    params = {}

    c_in = 1
    for l, c_out in enumerate(cfg.encoder.channels_per_level):
        params[f"encoder.level{l}.down.weight"] = _uniform(rng, c_in * 9, (c_out, c_in, 3, 3))
        params[f"encoder.level{l}.down.bias"] = _uniform(rng, c_in * 9, (c_out,))
        params[f"encoder.level{l}.res.weight"] = _uniform(rng, c_out * 9, (c_out, c_out, 3, 3))
        params[f"encoder.level{l}.res.bias"] = _uniform(rng, c_out * 9, (c_out,))
        c_in = c_out

    fusion = FusionParams.init(cfg.encoder.channels, seed=int(rng.integers(2 ** 31)))
    params.update({"fusion.w1": fusion.w1, "fusion.b1": fusion.b1,
                   "fusion.w2": fusion.w2, "fusion.b2": fusion.b2})

    c, width = cfg.encoder.channels, cfg.decoder.width
    params["decoder.input.weight"] = _uniform(rng, c * 27, (width, c, 3, 3, 3))
    params["decoder.input.bias"] = _uniform(rng, c * 27, (width,))
    for b in range(cfg.decoder.residual_blocks):
        for part in ("conv1", "conv2"):
            params[f"decoder.res{b}.{part}.weight"] = _uniform(rng, width * 27, (width, width, 3, 3, 3))
            params[f"decoder.res{b}.{part}.bias"] = _uniform(rng, width * 27, (width,))
    for b in range(cfg.decoder.upsample_blocks):
        params[f"decoder.up{b}.weight"] = _uniform(rng, width * 27, (width, width, 3, 3, 3))
        params[f"decoder.up{b}.bias"] = _uniform(rng, width * 27, (width,))
    params["decoder.output.weight"] = _uniform(rng, width, (1, width, 1, 1, 1))
    params["decoder.output.bias"] = np.array([math.log(math.expm1(OUTPUT_PRIOR_MU))])
    return ModelState(params)


# ---------------------------------------------------------------------------
# Tensor-level forward passes
# ---------------------------------------------------------------------------

def encode_tensor(images: Tensor, params, cfg: EncoderConfig) -> list[Tensor]:
    """images: (N, 1, w, h) normalized projections -> one (N, C_l, w_l, h_l) map per level."""
    levels, x = [], images
    for l in range(cfg.levels):
        p = f"encoder.level{l}"
        x = gelu(conv(x, params[f"{p}.down.weight"], params[f"{p}.down.bias"], stride=cfg.stride, padding=1))
        x = x + gelu(conv(x, params[f"{p}.res.weight"], params[f"{p}.res.bias"], padding=1))
        levels.append(x)
    return levels


def decode_tensor(features: Tensor, params, cfg: DecoderConfig) -> Tensor:
    """features: (1, C, W/S, H/S, D/S) -> (W, H, D) non-negative attenuation."""
    x = gelu(conv(features, params["decoder.input.weight"], params["decoder.input.bias"], padding=1))
    for b in range(cfg.residual_blocks):
        p = f"decoder.res{b}"
        h = gelu(conv(x, params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"], padding=1))
        x = x + conv(h, params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"], padding=1)
    for b in range(cfg.upsample_blocks):
        x = gelu(conv(upsample_nearest(x, 2), params[f"decoder.up{b}.weight"],
                      params[f"decoder.up{b}.bias"], padding=1))
    out = softplus(conv(x, params["decoder.output.weight"], params["decoder.output.bias"]))
    return out.reshape(*out.shape[2:])


def build_plan(poses, volume_shape, spacing, cfg: ModelConfig):
    """Gather matrices for every view and encoder level at the stride-S query points."""
    points = query_points(volume_shape, spacing, cfg.downsample)
    detector_shape = poses[0].detector_shape
    return gather_plan(poses, points, cfg.encoder.level_shapes(detector_shape),
                       cfg.encoder.level_strides())


def normalize(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return (images - cfg.norm_mean) / cfg.norm_std


def forward_tensor(images: np.ndarray, plan, volume_shape, params, cfg: ModelConfig) -> Tensor:
    """Full pipeline for one case: (N, w, h) projections -> (W, H, D) prediction."""
    levels = encode_tensor(Tensor(normalize(images, cfg)[:, None]), params, cfg.encoder)
    gathered = gather_levels(levels, plan)
    fused, _ = fuse_tensor(gathered, params["fusion.w1"], params["fusion.b1"],
                           params["fusion.w2"], params["fusion.b2"], cfg.strategy)
    coarse = tuple(n // cfg.downsample for n in volume_shape)
    features = fused.transpose(1, 0).reshape(1, fused.shape[1], *coarse)
    return decode_tensor(features, params, cfg.decoder)


# ---------------------------------------------------------------------------
# Array-level operations
# ---------------------------------------------------------------------------

def encode(projections: ProjectionStack, cfg: ModelConfig, state: ModelState) -> list[list[ImageGrid]]:
    """Feature pyramid per view; level l is an ImageGrid with stride 2^(l+1)."""
    levels = encode_tensor(Tensor(normalize(projections.array, cfg)[:, None]),
                           {k: Tensor(v) for k, v in state.params.items()}, cfg.encoder)
    strides = cfg.encoder.level_strides()
    return [[ImageGrid(level.data[v], stride) for level, stride in zip(levels, strides)]
            for v in range(len(projections))]


def decode(fv: FeatureVolume, cfg: ModelConfig, state: ModelState) -> Volume:
    expected = state.params["decoder.input.weight"].shape[1]
    if fv.channels != expected:
        raise ShapeMismatchError(f"feature volume has {fv.channels} channels, decoder expects {expected}")
    if fv.stride != cfg.decoder.scale:
        raise ShapeMismatchError(
            f"feature volume stride {fv.stride} needs {int(math.log2(fv.stride))} upsampling blocks")
    out = decode_tensor(Tensor(fv.data[None]), {k: Tensor(v) for k, v in state.params.items()},
                        cfg.decoder)
    return Volume(out.data, fv.spacing)


def predict(projections: ProjectionStack, volume_shape, spacing, cfg: ModelConfig,
            state: ModelState, plan=None) -> Volume:
    """Inference: encode -> gather/fuse -> decode."""
    if plan is None:
        plan = build_plan(projections.poses, volume_shape, spacing, cfg)
    params = {k: Tensor(v) for k, v in state.params.items()}
    out = forward_tensor(projections.array, plan, volume_shape, params, cfg)
    return Volume(out.data, spacing)
