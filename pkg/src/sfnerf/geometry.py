"""Pinhole cameras, ray generation and sampling of conical frustums along rays.

Conventions: cameras look down their local -z axis with +y up (OpenGL style);
``pose`` is the 3x4 world-from-camera transform.  Pixel coordinates handed to
the transient branch are normalised to ``[0, 1]^2`` as ``((col + .5) / W,
(row + .5) / H)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # (3, 4) world-from-camera
    height: int
    width: int
    near: float
    far: float

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (3, 4):
            raise ValueError(f"pose must be 3x4, got {pose.shape}")
        object.__setattr__(self, "pose", pose)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        rot = pose[:, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() >= 1e-6:
            raise ValueError("rotation part of pose is not orthonormal")
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        if self.height < 1 or self.width < 1:
            raise ValueError("image resolution must be at least 1x1")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:, 3]

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resized by ``1 / factor`` (integer downsampling)."""
        return Camera(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            pose=self.pose,
            height=self.height // int(factor),
            width=self.width // int(factor),
            near=self.near,
            far=self.far,
        )

    @staticmethod
    def look_at(eye, target, up, fx, fy, cx, cy, height, width, near, far) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        back = eye - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(np.asarray(up, dtype=np.float64), back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        pose = np.column_stack([right, true_up, back, eye])
        return Camera(fx, fy, cx, cy, pose, height, width, near, far)


@dataclass
class Rays:
    """A batch of rays; every field is a tensor with leading dimension N."""

    origins: torch.Tensor  # (N, 3)
    directions: torch.Tensor  # (N, 3), unit length
    pixels: torch.Tensor  # (N, 2), normalised to [0, 1]
    image_ids: torch.Tensor  # (N,) int64
    radii: torch.Tensor  # (N,) cone radius at unit distance
    near: torch.Tensor  # (N,)
    far: torch.Tensor  # (N,)

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx) -> "Rays":
        return Rays(*(getattr(self, f)[idx] for f in self._fields()))

    @staticmethod
    def _fields():
        return ("origins", "directions", "pixels", "image_ids", "radii", "near", "far")

    def to(self, dtype=None) -> "Rays":
        out = {}
        for f in self._fields():
            v = getattr(self, f)
            out[f] = v if f == "image_ids" or dtype is None else v.to(dtype)
        return Rays(**out)

    @staticmethod
    def cat(parts: list["Rays"]) -> "Rays":
        return Rays(*(torch.cat([getattr(p, f) for p in parts]) for f in Rays._fields()))


@dataclass
class FrustumSamples:
    """Interval boundaries along each ray and the Gaussian moments of every frustum."""

    t: torch.Tensor  # (N, K + 1) boundaries
    means: torch.Tensor  # (N, K, 3)
    covs: torch.Tensor  # (N, K, 3) diagonal covariances

    @property
    def deltas(self) -> torch.Tensor:
        return self.t[..., 1:] - self.t[..., :-1]

    @property
    def num_intervals(self) -> int:
        return self.t.shape[-1] - 1


def generate_rays(camera: Camera, pixels=None, image_id: int = 0, dtype=torch.float64) -> Rays:
    """Rays through pixel centres.

    ``pixels`` is an integer array of ``(row, col)`` pairs; ``None`` means the
    full image in row-major order.
    """
    if pixels is None:
        rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValueError("pixels must be an (N, 2) array of (row, col) indices")
    rows, cols = pixels[:, 0], pixels[:, 1]
    if np.any(rows < 0) or np.any(rows >= camera.height) or np.any(cols < 0) or np.any(cols >= camera.width):
        raise ValueError(f"pixel index outside [0, {camera.height}) x [0, {camera.width})")

    u = cols + 0.5
    v = rows + 0.5
    local = np.stack(
        [(u - camera.cx) / camera.fx, -(v - camera.cy) / camera.fy, -np.ones_like(u, dtype=np.float64)],
        axis=-1,
    )
    norm = np.linalg.norm(local, axis=-1)
    dirs = (local / norm[:, None]) @ camera.rotation.T
    # mip-NeRF footprint: pixel width at unit depth scaled to a disc of equal variance,
    # then re-expressed per unit length along the normalised direction.
    radii = (2.0 / math.sqrt(12.0)) / math.sqrt(camera.fx * camera.fy) / norm
    n = len(pixels)
    as_t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
    return Rays(
        origins=as_t(np.broadcast_to(camera.center, (n, 3))),
        directions=as_t(dirs),
        pixels=as_t(np.stack([u / camera.width, v / camera.height], axis=-1)),
        image_ids=torch.full((n,), image_id, dtype=torch.int64),
        radii=as_t(radii),
        near=as_t(np.full(n, camera.near)),
        far=as_t(np.full(n, camera.far)),
    )


def conical_frustum_moments(rays: Rays, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Closed-form Gaussian approximation of the cone segments between boundaries ``t``."""
    t0, t1 = t[..., :-1], t[..., 1:]
    mu = (t0 + t1) / 2
    hw = (t1 - t0) / 2
    denom = 3 * mu**2 + hw**2
    t_mean = mu + 2 * mu * hw**2 / denom
    t_var = hw**2 / 3 - (4 / 15) * (hw**4 * (12 * mu**2 - hw**2)) / denom**2
    r_var = rays.radii[:, None] ** 2 * (mu**2 / 4 + (5 / 12) * hw**2 - (4 / 15) * hw**4 / denom)

    d = rays.directions[:, None, :]
    means = rays.origins[:, None, :] + t_mean[..., None] * d
    d_sq = d**2
    covs = t_var[..., None] * d_sq + r_var[..., None] * (1 - d_sq)
    return means, covs


def _samples(rays: Rays, t: torch.Tensor) -> FrustumSamples:
    means, covs = conical_frustum_moments(rays, t)
    return FrustumSamples(t=t, means=means, covs=covs)


def stratum_bounds(num_samples: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Lower/upper edges, as fractions of ``[near, far]``, of the cell around each uniform boundary."""
    grid = torch.linspace(0.0, 1.0, num_samples + 1, dtype=dtype)
    mids = (grid[1:] + grid[:-1]) / 2
    lower = torch.cat([grid[:1], mids])
    upper = torch.cat([mids, grid[-1:]])
    return lower, upper


def stratified_sample(rays: Rays, num_samples: int, jitter: bool = False, generator=None) -> FrustumSamples:
    """Split ``[near, far]`` into ``num_samples`` intervals.

    Without jitter the ``num_samples + 1`` boundaries are uniform.  With jitter
    each boundary gets one uniform draw inside its stratum, the cell between
    the midpoints around its uniform position (the end cells are half width),
    as in mip-NeRF.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if torch.any(rays.near >= rays.far):
        raise ValueError("near must be < far")
    n = len(rays)
    dtype = rays.origins.dtype
    if jitter:
        lower, upper = stratum_bounds(num_samples, dtype)
        u = torch.rand((n, num_samples + 1), generator=generator, dtype=dtype)
        grid = lower + (upper - lower) * u
    else:
        grid = torch.linspace(0.0, 1.0, num_samples + 1, dtype=dtype).expand(n, num_samples + 1)
    t = rays.near[:, None] + (rays.far - rays.near)[:, None] * grid
    return _samples(rays, _make_strict(t))


def sample_pdf(bins: torch.Tensor, weights: torch.Tensor, num: int, deterministic: bool, generator=None):
    """Inverse-CDF draws from the piecewise-constant density given by ``weights`` over ``bins``.

    Rows whose weights sum to zero fall back to a uniform density.
    """
    weights = weights.clamp_min(0)
    total = weights.sum(-1, keepdim=True)
    uniform = torch.ones_like(weights) / weights.shape[-1]
    pdf = torch.where(total > 0, weights / torch.where(total > 0, total, torch.ones_like(total)), uniform)
    cdf = torch.cumsum(pdf, -1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], -1)
    cdf[..., -1] = 1.0

    n = weights.shape[0]
    if deterministic:
        u = ((torch.arange(num, dtype=weights.dtype) + 0.5) / num).expand(n, num).contiguous()
    else:
        u = torch.rand((n, num), generator=generator, dtype=weights.dtype)

    idx = torch.searchsorted(cdf, u, right=True)
    below = (idx - 1).clamp(0, bins.shape[-1] - 2)
    above = below + 1
    cdf_lo = torch.gather(cdf, -1, below)
    cdf_hi = torch.gather(cdf, -1, above)
    bin_lo = torch.gather(bins, -1, below)
    bin_hi = torch.gather(bins, -1, above)
    span = cdf_hi - cdf_lo
    frac = torch.where(span > 0, (u - cdf_lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(span))
    return bin_lo + frac * (bin_hi - bin_lo)


def _make_strict(t: torch.Tensor) -> torch.Tensor:
    # Exact ties are a measure-zero event; nudge them apart by one ulp at a time.
    for _ in range(t.shape[-1]):
        dup = t[..., 1:] <= t[..., :-1]
        if not dup.any():
            break
        bumped = torch.nextafter(t[..., :-1], torch.full_like(t[..., :-1], math.inf))
        t = torch.cat([t[..., :1], torch.where(dup, bumped, t[..., 1:])], -1)
    return t


def hierarchical_resample(
    rays: Rays,
    coarse: FrustumSamples,
    weights: torch.Tensor,
    num_fine: int,
    deterministic: bool = False,
    generator=None,
    padding: float = 0.0,
) -> FrustumSamples:
    """Importance-sample ``num_fine`` distances from the coarse weight histogram.

    The new distances are merged with the coarse boundaries so the returned
    set has ``K + num_fine`` intervals covering the same ``[near, far]``.
    ``padding`` is added to every weight before normalising.
    """
    weights = weights.detach()
    if not torch.all(torch.isfinite(weights)) or torch.any(weights < 0):
        raise ValueError("resampling weights must be finite and non-negative")
    bins = coarse.t.detach()
    draws = sample_pdf(bins, weights + padding, num_fine, deterministic, generator)
    t, _ = torch.sort(torch.cat([bins, draws], -1), -1)
    return _samples(rays, _make_strict(t))
