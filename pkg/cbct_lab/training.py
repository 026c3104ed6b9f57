"""
Training loop, Adam optimizer and finite-difference gradient checks.

One training step runs the full forward pass (encode -> gather/fuse ->
decode), evaluates total_loss on the case, backpropagates through every
stage and applies one Adam update. Ray batches are drawn from a generator
seeded by (seed, step), so two runs with the same configuration produce
bitwise-identical parameters.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
import polars as pl
from tqdm import tqdm

from cbct_lab.autograd import Tensor
from cbct_lab.config import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, EPOCHS, FD_STEP, LAMBDA_GRAD, LAMBDA_PROJ, LEARNING_RATE,
    LR_DECAY, LR_DECAY_EVERY, RAY_BATCH,
)
from cbct_lab.errors import NonFiniteLossError
from cbct_lab.losses import (
    RayBatch, grad_loss_tensor, proj_loss_tensor, recon_loss_tensor, sample_ray_batch, total_loss,
)
from cbct_lab.network import ModelConfig, ModelState, build_plan, forward_tensor, init_model_state
from cbct_lab.phantoms import DEFAULT_ELLIPSOIDS, random_ellipsoids
from cbct_lab.projector import ProjectionStack, render_stack
from cbct_lab.volume import Volume

PROJ_TARGETS = ("simulated", "measured")
MODULES = ("encoder", "fusion", "decoder")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = LEARNING_RATE
    lr_decay: float = LR_DECAY
    decay_every: int = LR_DECAY_EVERY
    epochs: int = EPOCHS
    batch_size: int = 1
    lambda_grad: float = LAMBDA_GRAD
    lambda_proj: float = LAMBDA_PROJ
    ray_batch: int = RAY_BATCH
    seed: int = 0
    proj_target: str = "simulated"
    shuffle: bool = True
    step: float | None = None

    def __post_init__(self):
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr must be > 0 and lr_decay in (0, 1]")
        if self.decay_every < 1 or self.epochs < 1:
            raise ValueError("decay_every and epochs must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.lambda_grad < 0 or self.lambda_proj < 0:
            raise ValueError("loss weights must be >= 0")
        if self.ray_batch < 1:
            raise ValueError("ray batch must hold at least one ray")
        if self.proj_target not in PROJ_TARGETS:
            raise ValueError(f"proj_target must be one of {PROJ_TARGETS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TrainingCase:
    """A ground-truth volume and its projections."""

    gt: Volume
    projections: ProjectionStack
    case_id: str = ""


@dataclass
class LossBreakdown:
    total: float
    recon: float
    grad: float
    proj: float

    def as_dict(self) -> dict:
        return asdict(self)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: lr * lr_decay ** (epoch // decay_every), epochs counted from 0."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)


def batch_seed(cfg: TrainConfig, step: int) -> int:
    return cfg.seed * 1_000_003 + step


def _geometry_key(case: TrainingCase):
    poses = case.projections.poses
    vectors = np.array([[p.source, p.detector_center, p.u_basis, p.v_basis] for p in poses])
    return vectors.tobytes(), tuple(poses[0].detector_shape), case.gt.shape, case.gt.spacing


@dataclass(eq=False)
class TrainingContext:
    """Gather plans cached per geometry; cases with one geometry share a plan."""

    plans: dict = field(default_factory=dict)

    def plan_for(self, case: TrainingCase, cfg: ModelConfig):
        key = _geometry_key(case) + (cfg.downsample, cfg.encoder.levels)
        if key not in self.plans:
            self.plans[key] = build_plan(case.projections.poses, case.gt.shape, case.gt.spacing, cfg)
        return self.plans[key]

    def ray_batch(self, case: TrainingCase, cfg: TrainConfig, seed) -> RayBatch:
        gt = case.gt if cfg.proj_target == "simulated" else None
        return sample_ray_batch(case.projections, case.gt.shape, case.gt.spacing, cfg.ray_batch,
                                seed=seed, step=cfg.step, gt=gt)


# ---------------------------------------------------------------------------
# Loss evaluation
# ---------------------------------------------------------------------------

def case_loss(case: TrainingCase, params, model_cfg: ModelConfig, train_cfg: TrainConfig,
              plan, batch: RayBatch):
    """Returns (total loss Tensor, LossBreakdown)."""
    pred = forward_tensor(case.projections.array, plan, case.gt.shape, params, model_cfg)
    l_recon = recon_loss_tensor(pred, case.gt.values)
    l_grad = grad_loss_tensor(pred, case.gt.values)
    l_proj = proj_loss_tensor(pred, batch)
    total = total_loss(l_recon, l_grad, l_proj, train_cfg.lambda_grad, train_cfg.lambda_proj)
    return total, LossBreakdown(total.item(), l_recon.item(), l_grad.item(), l_proj.item())


def evaluate_loss(case: TrainingCase, state: ModelState, model_cfg: ModelConfig,
                  train_cfg: TrainConfig, context: TrainingContext | None = None,
                  seed=None) -> LossBreakdown:
    context = TrainingContext() if context is None else context
    seed = batch_seed(train_cfg, state.step) if seed is None else seed
    params = {k: Tensor(v) for k, v in state.params.items()}
    _, breakdown = case_loss(case, params, model_cfg, train_cfg, context.plan_for(case, model_cfg),
                             context.ray_batch(case, train_cfg, seed))
    return breakdown


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adam_update(state: ModelState, grads, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2,
                eps=ADAM_EPS) -> ModelState:
    """One Adam step with bias correction; returns a new state."""
    step = state.step + 1
    params, m_new, v_new = {}, {}, {}
    for name, value in state.params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return ModelState(params, m_new, v_new, step)


def train_step(case: TrainingCase, state: ModelState, model_cfg: ModelConfig,
               train_cfg: TrainConfig, context: TrainingContext | None = None, lr=None):
    """One forward/backward pass and Adam update. Returns (new state, LossBreakdown)."""
    if not state.is_finite():
        raise NonFiniteLossError(f"model state has non-finite parameters before step {state.step}")
    context = TrainingContext() if context is None else context
    lr = train_cfg.lr if lr is None else lr
    params = state.tensors()
    batch = context.ray_batch(case, train_cfg, batch_seed(train_cfg, state.step))
    total, breakdown = case_loss(case, params, model_cfg, train_cfg,
                                 context.plan_for(case, model_cfg), batch)
    if not np.isfinite(breakdown.total):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step} on case {case.case_id or '?'}: "
            f"recon={breakdown.recon} grad={breakdown.grad} proj={breakdown.proj}")
    total.backward()
    grads = {name: t.grad if t.grad is not None else np.zeros_like(t.data)
             for name, t in params.items()}
    return adam_update(state, grads, lr), breakdown


def train(cases: list[TrainingCase], model_cfg: ModelConfig, train_cfg: TrainConfig,
          state: ModelState | None = None, max_steps=None, progress=False):
    """
    Train over the cases for train_cfg.epochs epochs (or max_steps steps).

    Returns (state, history) where history is a polars DataFrame with one row
    per step.
    """
    if not cases:
        raise ValueError("training needs at least one case")
    state = init_model_state(model_cfg, train_cfg.seed) if state is None else state
    context = TrainingContext()
    rng = np.random.default_rng(train_cfg.seed)
    rows = []
    total_steps = train_cfg.epochs * len(cases) if max_steps is None else max_steps
    bar = tqdm(total=total_steps, desc="Training", disable=not progress)

    for epoch in range(train_cfg.epochs if max_steps is None else total_steps):
        lr = learning_rate(train_cfg, epoch)
        order = rng.permutation(len(cases)) if train_cfg.shuffle else np.arange(len(cases))
        for index in order:
            if len(rows) >= total_steps:
                break
            case = cases[index]
            state, losses = train_step(case, state, model_cfg, train_cfg, context, lr=lr)
            rows.append({"step": state.step, "epoch": epoch, "case_id": case.case_id, "lr": lr,
                         **losses.as_dict()})
            bar.update(1)
            bar.set_postfix(loss=f"{losses.total:.4g}")
        if len(rows) >= total_steps:
            break
    bar.close()
    return state, pl.DataFrame(rows)


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

@dataclass
class ModuleCheck:
    module: str
    samples: int
    max_rel_error: float
    mean_rel_error: float


@dataclass
class GradientReport:
    h: float
    modules: list[ModuleCheck]

    @property
    def max_rel_error(self) -> float:
        return max(m.max_rel_error for m in self.modules)

    def passed(self, tol=1e-4) -> bool:
        return self.max_rel_error < tol

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame([asdict(m) for m in self.modules])


def relative_errors(analytic, numeric) -> np.ndarray:
    """|a - n| / max(|a|, |n|, 1e-3 * max|a|) over the sampled entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    floor = max(1e-3 * float(np.max(np.abs(analytic), initial=0.0)), 1e-300)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def finite_difference(loss_fn, arrays: dict, picks, h=FD_STEP) -> np.ndarray:
    """Central differences of loss_fn() w.r.t. arrays[name].flat[index] for (name, index) picks."""
    out = np.empty(len(picks))
    for k, (name, index) in enumerate(picks):
        a = arrays[name]
        original = a.flat[index]
        a.flat[index] = original + h
        plus = loss_fn()
        a.flat[index] = original - h
        minus = loss_fn()
        a.flat[index] = original
        out[k] = (plus - minus) / (2.0 * h)
    return out


def sample_entries(arrays: dict, names, count, rng):
    """Draw up to `count` distinct (name, flat index) pairs uniformly over the named arrays."""
    sizes = np.array([arrays[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = np.sort(rng.choice(offsets[-1], size=min(count, offsets[-1]), replace=False))
    which = np.searchsorted(offsets, picks, side="right") - 1
    return [(names[w], int(p - offsets[w])) for w, p in zip(which, picks)]


def anchored_case(case: TrainingCase, state: ModelState, model_cfg: ModelConfig,
                  context: TrainingContext) -> TrainingCase:
    """
    Replace the ground truth by prediction + 1 + 0.5 (i + j + k).

    Every voxel residual and every forward-difference residual then sits far
    from zero, so the L1 terms are smooth within the finite-difference step.
    """
    params = {k: Tensor(v) for k, v in state.params.items()}
    pred = forward_tensor(case.projections.array, context.plan_for(case, model_cfg),
                          case.gt.shape, params, model_cfg).data
    ramp = np.indices(pred.shape).sum(axis=0)
    return TrainingCase(Volume(pred + 1.0 + 0.5 * ramp, case.gt.spacing), case.projections,
                        case.case_id)


def gradient_check(state: ModelState, case: TrainingCase, model_cfg: ModelConfig,
                   train_cfg: TrainConfig = TrainConfig(), sample_count=50, h=FD_STEP, seed=0,
                   anchor=True) -> GradientReport:
    """
    Compare analytic gradients of total_loss with central finite differences
    for sample_count random parameters of each module.
    """
    state = state.copy()
    context = TrainingContext()
    if anchor:
        case = anchored_case(case, state, model_cfg, context)
    check_cfg = TrainConfig(**{**train_cfg.to_dict(), "proj_target": "simulated"}) if anchor else train_cfg
    plan = context.plan_for(case, model_cfg)
    batch = context.ray_batch(case, check_cfg, seed)

    params = state.tensors()
    total, _ = case_loss(case, params, model_cfg, check_cfg, plan, batch)
    total.backward()

    def loss_fn():
        plain = {k: Tensor(v) for k, v in state.params.items()}
        return case_loss(case, plain, model_cfg, check_cfg, plan, batch)[0].item()

    rng = np.random.default_rng(seed)
    modules = []
    for module in MODULES:
        names = [n for n in state.params if n.startswith(module + ".")]
        picks = sample_entries(state.params, names, sample_count, rng)
        analytic = np.array([0.0 if params[n].grad is None else params[n].grad.flat[i] for n, i in picks])
        numeric = finite_difference(loss_fn, state.params, picks, h)
        errors = relative_errors(analytic, numeric)
        modules.append(ModuleCheck(module, len(picks), float(errors.max()), float(errors.mean())))
    return GradientReport(h, modules)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def synthetic_cases(count, poses, volume_shape, spacing, first_seed=0, k=DEFAULT_ELLIPSOIDS,
                    step=None, progress=False) -> list[TrainingCase]:
    """Random-ellipsoid phantoms with their noise-free DRR stacks, seeds first_seed, first_seed+1, ..."""
    cases = []
    for seed in tqdm(range(first_seed, first_seed + count), desc="Phantoms", disable=not progress):
        gt = random_ellipsoids(volume_shape, spacing, k=k, seed=seed)
        cases.append(TrainingCase(gt, render_stack(gt, poses, step=step), f"ellipsoids-{seed:04d}"))
    return cases


def projection_stats(cases) -> tuple[float, float]:
    """Mean and standard deviation over every projection pixel of the cases."""
    values = np.concatenate([c.projections.array.reshape(-1) for c in cases])
    std = float(values.std())
    return float(values.mean()), std if std > 0 else 1.0
