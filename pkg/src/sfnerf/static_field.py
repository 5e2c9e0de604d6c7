"""Latent-conditional static radiance field and the quadrature volume renderer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .encoding import integrated_positional_encode, positional_encode
from .exceptions import NumericError
from .geometry import FrustumSamples


def init_linear_(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn from ``generator``."""
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            bound = 1.0 / math.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=generator, dtype=torch.float64) * 2 * bound - bound)
                layer.bias.copy_(torch.rand(layer.bias.shape, generator=generator, dtype=torch.float64) * 2 * bound - bound)


@dataclass
class RadianceSamples:
    density: torch.Tensor  # (N, K)
    color: torch.Tensor  # (N, K, 3)
    feature: torch.Tensor  # (N, K, W) trunk output fed to the color head


@dataclass
class RenderResult:
    color: torch.Tensor  # (N, 3)
    weights: torch.Tensor  # (N, K)
    transmittance: torch.Tensor  # (N, K + 1); last column is the leftover after the final interval
    opacity: torch.Tensor  # (N,)


class StaticField(nn.Module):
    """Density from integrated-encoded frustums, color from (direction, trunk feature, appearance code).

    Density never sees the viewing direction or the appearance code.
    """

    def __init__(
        self,
        L_x: int = 10,
        L_d: int = 4,
        appearance_dim: int = 48,
        depth: int = 8,
        width: int = 256,
        color_width: int = 128,
        skip: int | None = 4,
        density_shift: float = -1.0,
        scene_scale: float = 1.0,
    ):
        super().__init__()
        self.L_x = L_x
        self.L_d = L_d
        self.appearance_dim = appearance_dim
        self.skip = skip
        self.density_shift = density_shift
        self.scene_scale = scene_scale

        in_dim = 2 * 3 * L_x
        layers = []
        for i in range(depth):
            fan_in = in_dim if i == 0 else width
            if skip is not None and i == skip and i > 0:
                fan_in += in_dim
            layers.append(nn.Linear(fan_in, width))
        self.trunk = nn.ModuleList(layers)
        self.density_head = nn.Linear(width, 1)
        self.color_hidden = nn.Linear(2 * 3 * L_d + width + appearance_dim, color_width)
        self.color_out = nn.Linear(color_width, 3)

    def forward(self, samples: FrustumSamples, directions: torch.Tensor, appearance: torch.Tensor) -> RadianceSamples:
        if appearance.shape[-1] != self.appearance_dim:
            raise ValueError(f"appearance code has dim {appearance.shape[-1]}, expected {self.appearance_dim}")
        if directions.shape[0] != samples.means.shape[0] or appearance.shape[0] != samples.means.shape[0]:
            raise ValueError("directions / appearance batch does not match the sample set")
        s = self.scene_scale
        x = integrated_positional_encode(samples.means * s, samples.covs * (s * s), self.L_x)
        h = x
        for i, layer in enumerate(self.trunk):
            if self.skip is not None and i == self.skip and i > 0:
                h = torch.cat([h, x], -1)
            h = F.relu(layer(h))
        density = F.softplus(self.density_head(h)[..., 0] + self.density_shift)

        # color_hidden acts on [gamma_d(d), z, appearance]; the per-ray blocks are applied once
        # per ray instead of once per sample.
        d_enc = positional_encode(directions, self.L_d)
        nd = d_enc.shape[-1]
        wgt = self.color_hidden.weight
        w_d, w_z, w_a = wgt[:, :nd], wgt[:, nd : nd + h.shape[-1]], wgt[:, nd + h.shape[-1] :]
        per_ray = d_enc @ w_d.T + appearance @ w_a.T + self.color_hidden.bias
        c = F.relu(h @ w_z.T + per_ray[:, None, :])
        color = torch.sigmoid(self.color_out(c))
        return RadianceSamples(density=density, color=color, feature=h)


def render_ray(samples: FrustumSamples, density: torch.Tensor, color: torch.Tensor) -> RenderResult:
    """Alpha-composite per-interval densities and colors (black where nothing accumulates)."""
    if density.shape[-1] != samples.num_intervals:
        raise ValueError(f"{density.shape[-1]} densities for {samples.num_intervals} intervals")
    bad = ~torch.isfinite(density)
    if bad.any():
        rays = torch.nonzero(bad.any(-1)).flatten().tolist()
        raise NumericError("non-finite density", rays=rays)
    tau = density * samples.deltas
    alpha = 1 - torch.exp(-tau)
    acc = torch.cumsum(tau, -1)
    transmittance = torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc], -1))
    weights = transmittance[..., :-1] * alpha
    rgb = (weights[..., None] * color).sum(-2)
    return RenderResult(color=rgb, weights=weights, transmittance=transmittance, opacity=weights.sum(-1))
