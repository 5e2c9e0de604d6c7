"""Frequency encodings.

Layout is band-major: ``[band_0 | band_1 | ... | band_{L-1}]`` where band ``k``
is ``[cos(2^k pi v), sin(2^k pi v)]`` with the ``n`` input axes kept together,
so band ``k`` of an ``n``-vector occupies ``2n`` consecutive features starting
at ``2nk`` (see :func:`band_slice`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class EncodingConfig:
    L_x: int = 10  # integrated encoding of frustums
    L_d: int = 4  # view directions
    L_p: int = 10  # normalised pixel coordinates

    def __post_init__(self):
        for name in ("L_x", "L_d", "L_p"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")


def _scales(num_bands: int, like: torch.Tensor) -> torch.Tensor:
    return (2.0 ** torch.arange(num_bands, dtype=like.dtype, device=like.device)) * math.pi


def positional_encode(v: torch.Tensor, num_bands: int) -> torch.Tensor:
    """Map ``(..., n)`` to ``(..., 2 n L)``."""
    scaled = v[..., None, :] * _scales(num_bands, v)[:, None]  # (..., L, n)
    out = torch.cat([torch.cos(scaled), torch.sin(scaled)], dim=-1)
    return out.reshape(*v.shape[:-1], 2 * v.shape[-1] * num_bands)


def integrated_positional_encode(mean: torch.Tensor, diag_cov: torch.Tensor, num_bands: int) -> torch.Tensor:
    """Expected encoding of a Gaussian with diagonal covariance.

    Each band is the point encoding of the mean damped by
    ``exp(-0.5 * (2^k pi)^2 * var)`` per axis.
    """
    if torch.any(diag_cov < 0):
        raise ValueError("variances must be non-negative")
    scales = _scales(num_bands, mean)
    scaled = mean[..., None, :] * scales[:, None]
    damp = torch.exp(-0.5 * diag_cov[..., None, :] * scales[:, None] ** 2)
    out = torch.cat([torch.cos(scaled) * damp, torch.sin(scaled) * damp], dim=-1)
    return out.reshape(*mean.shape[:-1], 2 * mean.shape[-1] * num_bands)


def band_slice(k: int, dim: int) -> slice:
    """Slice selecting band ``k`` of an encoded ``dim``-vector."""
    return slice(2 * dim * k, 2 * dim * (k + 1))
