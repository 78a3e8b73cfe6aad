"""Reconstruction losses and their analytic gradients.

Each term returns (value, gradient) against its immediate input; the
training loop chains these through the compositing and shading adjoints.
LossReport carries the unweighted component values plus the weighted
total so logs stay interpretable when weights change.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractViolation
from .grid import GridGradients, VoxelGrid

TV_EPS = 1e-8
BETA_CLAMP = 1e-5


@dataclass
class LossWeights:
    """Scale factors for the regularizers and the style term."""

    lambda_tv: float = 1e-3
    lambda_beta: float = 1e-4
    lambda_sparsity: float = 1e-5
    style_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda_tv", "lambda_beta", "lambda_sparsity", "style_weight"):
            if getattr(self, name) < 0.0:
                raise ContractViolation(f"{name} must be non-negative")


@dataclass
class LossReport:
    """Unweighted component values plus the weighted total."""

    mse: float
    tv: float
    sparsity: float
    beta: float
    style: float
    total: float

    def log_line(self, iteration: int) -> str:
        psnr = 99.0
        per_channel = self.mse / 3.0
        if per_channel > 0.0:
            psnr = min(10.0 * math.log10(1.0 / per_channel), 99.0)
        return json.dumps(
            {
                "iter": iteration,
                "total": self.total,
                "mse": self.mse,
                "tv": self.tv,
                "sparsity": self.sparsity,
                "beta": self.beta,
                "style": self.style,
                "psnr": psnr,
            }
        )


def weighted_total(mse, tv, sparsity, beta, style, weights: LossWeights) -> float:
    return (
        mse
        + weights.lambda_tv * tv
        + weights.lambda_beta * beta
        + weights.lambda_sparsity * sparsity
        + weights.style_weight * style
    )


def mse_loss(pred, target):
    """Mean over rays of the squared RGB error, summed over channels.

    Gradient w.r.t. pred is 2 (pred - target) / n_rays.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ContractViolation(f"pred/target must both be (N,3), got {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    if n == 0:
        raise ContractViolation("mse_loss over an empty batch is undefined")
    diff = pred - target
    value = float(np.sum(diff * diff) / n)
    return value, 2.0 * diff / n


def tv_loss(grid: VoxelGrid, grads: GridGradients = None, scale: float = 1.0):
    """Stabilized total variation over active voxels, normalized by their
    count; covers density and every SH channel. When grads is given the
    gradient times scale is accumulated into it."""
    n = grid.n_active
    if n == 0:
        return 0.0
    raw = kernels.tv_grad(
        grid.slot_map,
        grid.density,
        grid.sh,
        grid.resolution,
        TV_EPS,
        scale / n,
        grads.d_density if grads is not None else None,
        grads.d_sh if grads is not None else None,
    )
    return float(raw) / n


def sparsity_loss(sigmas):
    """log(1 + 2 sigma^2) summed over the batch samples (post-clamp sigma).

    Gradient is 4 sigma / (1 + 2 sigma^2).
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    value = float(np.sum(np.log1p(2.0 * sigmas * sigmas)))
    grad = 4.0 * sigmas / (1.0 + 2.0 * sigmas * sigmas)
    return value, grad


def beta_loss(t_fg):
    """Binary-entropy prior on residual transmittance, summed over rays.

    T is clamped to [1e-5, 1-1e-5]; outside the clamp the gradient is
    zero, which keeps fully-opaque and fully-empty rays stable.
    """
    t_fg = np.asarray(t_fg, dtype=np.float64)
    t = np.clip(t_fg, BETA_CLAMP, 1.0 - BETA_CLAMP)
    value = float(np.sum(np.log(t) + np.log1p(-t)))
    grad = np.where(
        (t_fg > BETA_CLAMP) & (t_fg < 1.0 - BETA_CLAMP),
        1.0 / t - 1.0 / (1.0 - t),
        0.0,
    )
    return value, grad


def rf_loss(
    grid: VoxelGrid,
    pred,
    target,
    t_fg,
    sample_sigmas,
    weights: LossWeights,
    grads: GridGradients = None,
):
    """Photometric term plus regularizers for one ray batch.

    Returns (report, d_pred, d_tfg, d_sigma) where the gradients carry
    their loss weights already applied; the TV gradient, when grads is
    given, is accumulated straight into the grid accumulators.
    """
    mse, d_pred = mse_loss(pred, target)
    tv = tv_loss(grid, grads, weights.lambda_tv)
    sp, d_sigma = sparsity_loss(sample_sigmas)
    beta, d_tfg = beta_loss(t_fg)
    total = weighted_total(mse, tv, sp, beta, 0.0, weights)
    report = LossReport(mse=mse, tv=tv, sparsity=sp, beta=beta, style=0.0, total=total)
    return report, d_pred, weights.lambda_beta * d_tfg, weights.lambda_sparsity * d_sigma


__all__ = [
    "LossWeights",
    "LossReport",
    "weighted_total",
    "mse_loss",
    "tv_loss",
    "sparsity_loss",
    "beta_loss",
    "rf_loss",
    "TV_EPS",
    "BETA_CLAMP",
]
