"""2D transient branch: image features, the filter MLP, Binary Concrete opacities, blending."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoding import positional_encode
from .exceptions import ConfigError, IngestionError, NumericError

FEAT_SUFFIX = ".feat"


class FeatureExtractor(Protocol):
    """Maps an ``(H, W, 3)`` image in ``[0, 1]`` to an ``(H, W, F)`` backbone feature map."""

    feature_dim: int

    def __call__(self, image: torch.Tensor, image_id: int | None = None) -> torch.Tensor: ...


class ConvEncoder(nn.Module):
    """Small stride-1 convolutional backbone; replicate padding keeps the output at input size."""

    def __init__(self, feature_dim: int = 32, hidden: int = 32, depth: int = 3, kernel_size: int = 3):
        super().__init__()
        self.feature_dim = feature_dim
        chans = [3] + [hidden] * (depth - 1) + [feature_dim]
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, kernel_size, padding=kernel_size // 2, padding_mode="replicate")
            for a, b in zip(chans[:-1], chans[1:])
        )

    def reset_parameters(self, generator: torch.Generator) -> None:
        for conv in self.convs:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                for p in (conv.weight, conv.bias):
                    p.copy_(torch.rand(p.shape, generator=generator, dtype=torch.float64) * 2 * bound - bound)

    def forward(self, image: torch.Tensor, image_id: int | None = None) -> torch.Tensor:
        h = image.permute(2, 0, 1)[None]
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.relu(h)
        return h[0].permute(1, 2, 0)


def write_feature_file(path, features: np.ndarray) -> None:
    """Header ``H, W, F`` as little-endian uint32, then ``H*W*F`` little-endian float32, row-major."""
    features = np.asarray(features)
    if features.ndim != 3:
        raise ValueError("feature map must be (H, W, F)")
    h, w, f = features.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", h, w, f))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing feature file {path}")
    raw = path.read_bytes()
    if len(raw) < 12:
        raise IngestionError(f"{path.name}: truncated header")
    h, w, f = struct.unpack("<3I", raw[:12])
    expected = 12 + 4 * h * w * f
    if len(raw) != expected:
        raise IngestionError(f"{path.name}: header says {h}x{w}x{f} but file has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, f).astype(np.float32)


class PrecomputedFeatures:
    """Backbone features read from ``<stem>.feat`` files and resized to the image size."""

    def __init__(self, directory, stems: list[str], feature_dim: int | None = None):
        self.directory = Path(directory)
        self.stems = list(stems)
        self._cache: dict[int, torch.Tensor] = {}
        if feature_dim is None:
            feature_dim = read_feature_file(self.directory / (self.stems[0] + FEAT_SUFFIX)).shape[-1]
        self.feature_dim = feature_dim

    def __call__(self, image: torch.Tensor, image_id: int | None = None) -> torch.Tensor:
        if image_id is None:
            raise ValueError("precomputed features are looked up by image id")
        if image_id not in self._cache:
            stem = self.stems[image_id]
            try:
                feats = read_feature_file(self.directory / (stem + FEAT_SUFFIX))
            except IngestionError as err:
                raise IngestionError(f"image {stem!r}: {err}") from err
            h, w = image.shape[:2]
            if feats.shape[-1] != self.feature_dim:
                raise IngestionError(f"image {stem!r}: feature dim {feats.shape[-1]}, expected {self.feature_dim}")
            fh, fw = feats.shape[:2]
            if fh * w != fw * h:
                raise IngestionError(f"image {stem!r}: feature map {fh}x{fw} does not match image aspect {h}x{w}")
            t = torch.from_numpy(feats).permute(2, 0, 1)[None]
            if (fh, fw) != (h, w):
                t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
            self._cache[image_id] = t[0].permute(1, 2, 0).contiguous()
        return self._cache[image_id].to(image.dtype)


class FeatureAdapter(nn.Module):
    """Pointwise three-layer MLP on backbone features."""

    def __init__(self, in_dim: int, width: int = 128, depth: int = 3):
        super().__init__()
        dims = [in_dim] + [width] * depth
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out_dim = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


@dataclass
class TransientOutput:
    alpha_param: torch.Tensor  # (N,) location of the Binary Concrete (softplus) or opacity itself (sigmoid head)
    color: torch.Tensor  # (N, 3)
    beta: torch.Tensor  # (N,) >= beta_min


class FilterNet(nn.Module):
    """MLP on ``[encoded pixel, transient code, pixel feature]``.

    ``opacity_head="softplus"`` predicts the Binary Concrete location;
    ``"sigmoid"`` predicts the opacity directly (no reparameterisation).
    """

    def __init__(
        self,
        L_p: int = 10,
        transient_dim: int = 128,
        feature_dim: int = 128,
        depth: int = 5,
        width: int = 128,
        beta_min: float = 0.1,
        opacity_head: str = "softplus",
    ):
        super().__init__()
        if opacity_head not in ("softplus", "sigmoid"):
            raise ConfigError(f"unknown opacity head {opacity_head!r}")
        self.L_p = L_p
        self.transient_dim = transient_dim
        self.feature_dim = feature_dim
        self.beta_min = beta_min
        self.opacity_head = opacity_head
        self.in_dim = 4 * L_p + transient_dim + feature_dim
        dims = [self.in_dim] + [width] * depth
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.alpha_out = nn.Linear(width, 1)
        self.color_out = nn.Linear(width, 3)
        self.beta_out = nn.Linear(width, 1)

    def encode_pixels(self, pixels: torch.Tensor) -> torch.Tensor:
        return positional_encode(pixels, self.L_p)

    def forward(self, pixel_enc: torch.Tensor, transient: torch.Tensor, features: torch.Tensor) -> TransientOutput:
        h = torch.cat([pixel_enc, transient, features], -1)
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"filter input has dim {h.shape[-1]}, expected {self.in_dim}")
        for layer in self.layers:
            h = F.relu(layer(h))
        raw_alpha = self.alpha_out(h)[..., 0]
        if self.opacity_head == "softplus":
            alpha = F.softplus(raw_alpha)
        else:
            alpha = torch.sigmoid(raw_alpha)
        return TransientOutput(
            alpha_param=alpha,
            color=torch.sigmoid(self.color_out(h)),
            beta=F.softplus(self.beta_out(h)[..., 0]) + self.beta_min,
        )


def filter_forward(net: FilterNet, pixels, transient, features) -> TransientOutput:
    """Evaluate ``net`` at normalised pixel coordinates ``pixels`` (N, 2)."""
    for name, v in (("pixels", pixels), ("transient", transient), ("features", features)):
        if not torch.all(torch.isfinite(v)):
            raise NumericError(f"non-finite {name} passed to the filter")
    return net(net.encode_pixels(pixels), transient, features)


def logistic_noise(shape, generator=None, dtype=torch.float64) -> torch.Tensor:
    """``log U - log(1 - U)`` for ``U ~ Uniform(0, 1)``."""
    u = torch.rand(shape, generator=generator, dtype=dtype)
    u = u.clamp(torch.finfo(dtype).tiny, 1 - torch.finfo(dtype).eps)
    return torch.log(u) - torch.log1p(-u)


def sample_transient_opacity(alpha_loc: torch.Tensor, temperature: float, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Binary Concrete relaxation, ``sigmoid((log a + log U - log(1 - U)) / t)``.

    ``noise`` is the logistic sample ``log U - log(1 - U)``; ``None`` means
    evaluation mode, ``U = 0.5``, i.e. zero noise.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    logits = torch.log(alpha_loc.clamp_min(torch.finfo(alpha_loc.dtype).tiny))
    if noise is not None:
        logits = logits + noise
    return torch.sigmoid(logits / temperature)


def blend(alpha: torch.Tensor, transient_color: torch.Tensor, static_color: torch.Tensor) -> torch.Tensor:
    a = alpha[..., None] if alpha.dim() == transient_color.dim() - 1 else alpha
    return a * transient_color + (1 - a) * static_color
