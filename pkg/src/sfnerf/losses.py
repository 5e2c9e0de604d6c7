"""Objective terms.  Per-ray functions return one value per ray; reductions happen in :func:`total_loss`."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .exceptions import ConfigError


@dataclass(frozen=True)
class LossWeights:
    lambda_alpha: float = 0.01
    lambda_coarse: float = 1.0
    lambda_smooth: float = 0.01
    lambda_sparse: float = 1e-4
    lambda_app: float = 0.01
    temperature: float = 0.5
    beta_min: float = 0.1
    detach_coarse_mask: bool = False

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k == "detach_coarse_mask":
                continue
            if v < 0:
                raise ConfigError(f"{k} must be >= 0")
        if not self.beta_min > 0:
            raise ConfigError("beta_min must be > 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")


def squared_error(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).sum(-1)


def transient_loss(pred, target, beta, alpha, lambda_alpha: float) -> torch.Tensor:
    """Gaussian negative log-likelihood with per-pixel scale ``beta`` plus an opacity penalty."""
    return squared_error(pred, target) / (2 * beta**2) + torch.log(beta**2) / 2 + lambda_alpha * alpha


def coarse_loss(alpha, coarse_color, target, detach_mask: bool = False) -> torch.Tensor:
    """Squared error of the coarse render, masked by the transient opacity."""
    if detach_mask:
        alpha = alpha.detach()
    return (1 - alpha) * squared_error(coarse_color, target)


def sparsity_loss(density: torch.Tensor) -> torch.Tensor:
    """Cauchy penalty ``sum_k log(1 + 2 sigma_k^2)`` over the samples of each ray."""
    return torch.log1p(2 * density**2).sum(-1)


def smoothness_loss(alpha: torch.Tensor, pixel_enc: torch.Tensor, num_bands: int, create_graph: bool = True) -> torch.Tensor:
    """Frequency-weighted L1 norm of d(alpha)/d(pixel encoding), per ray.

    ``alpha[i]`` must depend on ``pixel_enc`` only through row ``i`` (true for
    a per-pixel MLP).  Band ``k`` is weighted by ``2^k``.
    """
    if not pixel_enc.requires_grad:
        return torch.zeros_like(alpha)
    (grad,) = torch.autograd.grad(alpha.sum(), pixel_enc, create_graph=create_graph)
    per_band = grad.abs().reshape(grad.shape[0], num_bands, -1).sum(-1)
    scale = 2.0 ** torch.arange(num_bands, dtype=grad.dtype)
    return (per_band * scale).sum(-1)


def total_loss(transient, coarse, smooth, sparse, appearance_codes, weights: LossWeights):
    """Sum over rays of the weighted per-ray terms, plus the L2 penalty on the batch's appearance codes.

    ``appearance_codes`` holds one row per distinct image in the batch.
    Returns the scalar objective and the summed value of every term.
    """
    per_ray = transient + weights.lambda_coarse * coarse
    per_ray = per_ray + weights.lambda_smooth * smooth
    per_ray = per_ray + weights.lambda_sparse * sparse
    app = (appearance_codes**2).sum()
    total = per_ray.sum() + weights.lambda_app * app
    terms = {
        "transient": transient.detach().sum(),
        "coarse": coarse.detach().sum(),
        "smooth": smooth.detach().sum(),
        "sparse": sparse.detach().sum(),
        "appearance": app.detach(),
        "total": total.detach(),
    }
    return total, terms
