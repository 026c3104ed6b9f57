"""
Training losses.

All three terms are means (not sums) so the lambda weights do not depend on
the volume resolution or the ray batch size. Each loss has a Tensor form used
in training and an array form for evaluation and tests.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from cbct_lab.autograd import Tensor, as_tensor, sparse_matmul
from cbct_lab.config import LAMBDA_GRAD, LAMBDA_PROJ
from cbct_lab.errors import ShapeMismatchError
from cbct_lab.geometry import Ray
from cbct_lab.projector import ProjectionStack, projection_matrix, ray_matrix
from cbct_lab.volume import Volume


@dataclass(eq=False)
class RayBatch:
    """Sampled rays as rows of a DRR matrix, with their target line integrals."""

    matrix: sparse.csr_matrix
    target: np.ndarray
    views: np.ndarray | None = None
    pixels: np.ndarray | None = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if self.matrix.shape[0] == 0:
            raise ValueError("ray batch is empty")
        if self.matrix.shape[0] != self.target.size:
            raise ShapeMismatchError(
                f"{self.matrix.shape[0]} rays but {self.target.size} target values")

    def __len__(self):
        return self.target.size


def sample_ray_batch(stack: ProjectionStack, volume_shape, spacing, size, seed=0, step=None,
                     gt: Volume | None = None) -> RayBatch:
    """
    Draw `size` distinct (view, pixel) rays uniformly from the input views.

    With gt the targets are DRRs of the ground truth (simulated data);
    otherwise they are the measured projection values (real data).
    """
    n_views = len(stack)
    w, h = stack.detector_shape
    total = n_views * w * h
    if size < 1:
        raise ValueError("ray batch is empty")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=min(size, total), replace=False))
    views, pixels = np.divmod(picks, w * h)

    blocks = [projection_matrix(volume_shape, spacing, stack.poses[v], step, pixels[views == v])
              for v in np.unique(views)]
    matrix = sparse.vstack(blocks, format="csr")
    if gt is not None:
        if gt.shape != tuple(volume_shape):
            raise ShapeMismatchError(f"ground truth shape {gt.shape} differs from {volume_shape}")
        target = matrix @ gt.values.reshape(-1)
    else:
        measured = stack.array.reshape(n_views, -1)
        target = measured[views, pixels]
    return RayBatch(matrix, target, views, pixels)


def ray_batch_from_rays(rays: list[Ray], targets, volume_shape, spacing, step=None) -> RayBatch:
    if not rays:
        raise ValueError("ray batch is empty")
    origins = np.array([r.origin for r in rays])
    directions = np.array([r.direction for r in rays])
    return RayBatch(ray_matrix(volume_shape, spacing, origins, directions, step), targets)


# ---------------------------------------------------------------------------
# Tensor forms
# ---------------------------------------------------------------------------

def _check_same(a_shape, b_shape):
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeMismatchError(f"volume shapes differ: {tuple(a_shape)} vs {tuple(b_shape)}")


def recon_loss_tensor(pred: Tensor, gt) -> Tensor:
    gt = as_tensor(gt)
    _check_same(pred.shape, gt.shape)
    return (pred - gt).abs().mean()


def _forward_difference(x: Tensor, axis) -> Tensor:
    upper = [slice(None)] * x.ndim
    lower = [slice(None)] * x.ndim
    upper[axis] = slice(1, None)
    lower[axis] = slice(None, -1)
    return x[tuple(upper)] - x[tuple(lower)]


def grad_loss_tensor(pred: Tensor, gt) -> Tensor:
    """Mean |forward difference error| per axis, averaged over axes with size > 1."""
    gt = as_tensor(gt)
    _check_same(pred.shape, gt.shape)
    axes = [a for a in range(pred.ndim) if pred.shape[a] > 1]
    if not axes:
        return Tensor(0.0)
    terms = [(_forward_difference(pred, a) - _forward_difference(gt, a)).abs().mean() for a in axes]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def proj_loss_tensor(pred: Tensor, batch: RayBatch) -> Tensor:
    if batch.matrix.shape[1] != pred.data.size:
        raise ShapeMismatchError(
            f"ray batch covers {batch.matrix.shape[1]} voxels, prediction has {pred.data.size}")
    integrals = sparse_matmul(batch.matrix, pred.reshape(-1, 1)).reshape(-1)
    return (integrals - batch.target).abs().mean()


def total_loss(l_recon, l_grad, l_proj, lambda_grad=LAMBDA_GRAD, lambda_proj=LAMBDA_PROJ):
    """L_recon + lambda_grad * L_grad + lambda_proj * L_proj; works on floats and Tensors."""
    if lambda_grad < 0 or lambda_proj < 0:
        raise ValueError("loss weights must be >= 0")
    return l_recon + lambda_grad * l_grad + lambda_proj * l_proj


# ---------------------------------------------------------------------------
# Array forms
# ---------------------------------------------------------------------------

def loss_recon(gt: Volume, pred: Volume) -> float:
    return recon_loss_tensor(Tensor(pred.values), gt.values).item()


def loss_grad(gt: Volume, pred: Volume) -> float:
    return grad_loss_tensor(Tensor(pred.values), gt.values).item()


def loss_proj(pred: Volume, batch: RayBatch) -> float:
    return proj_loss_tensor(Tensor(pred.values), batch).item()
