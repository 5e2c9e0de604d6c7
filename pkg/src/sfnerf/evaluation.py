"""Image-quality and decomposition metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0

# Optional perceptual metric: f(img, ref) -> float.  Nothing is registered by default.
LPIPS_PLUGIN: Callable[[np.ndarray, np.ndarray], float] | None = None


def _check_pair(img, ref):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {ref.shape}")
    return img, ref


def psnr(img, ref) -> float:
    """``10 log10(1 / MSE)`` in dB for images in [0, 1]; identical images give ``PSNR_CAP``."""
    img, ref = _check_pair(img, ref)
    mse = np.mean((img - ref) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(img, ref, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows of the channel-mean images."""
    img, ref = _check_pair(img, ref)
    if img.ndim == 3:
        img, ref = img.mean(-1), ref.mean(-1)
    if min(img.shape) < size:
        raise ValueError(f"image {img.shape} is smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma)

    def filt(a):
        a = ndimage.correlate1d(a, g, axis=0, mode="constant")
        a = ndimage.correlate1d(a, g, axis=1, mode="constant")
        half = size // 2
        return a[half : a.shape[0] - half, half : a.shape[1] - half]

    c1, c2 = k1**2, k2**2
    mx, my = filt(img), filt(ref)
    sxx = filt(img * img) - mx * mx
    syy = filt(ref * ref) - my * my
    sxy = filt(img * ref) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx**2 + my**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def occluder_iou(opacity, mask, threshold: float = 0.5) -> float:
    pred = np.asarray(opacity) > threshold
    gt = np.asarray(mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def right_half(img):
    w = np.asarray(img).shape[1]
    return np.asarray(img)[:, w // 2 :]


@dataclass
class MetricRow:
    name: str
    psnr: float
    ssim: float
    iou: float | None = None
    lpips: float | None = None


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    summary_iou: float | None = None

    def add(self, name, img, ref, opacity=None, mask=None) -> MetricRow:
        row = MetricRow(name, psnr(img, ref), ssim(img, ref))
        if opacity is not None and mask is not None:
            row.iou = occluder_iou(opacity, mask)
        if LPIPS_PLUGIN is not None:
            row.lpips = float(LPIPS_PLUGIN(img, ref))
        self.rows.append(row)
        return row

    def mean(self, attr: str) -> float | None:
        vals = [getattr(r, attr) for r in self.rows if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    def to_text(self) -> str:
        """Tab-separated table: header, one row per image, then a ``mean`` row."""

        def fmt(v):
            return "nan" if v is None else f"{v:.6f}"

        lines = ["image\tpsnr\tssim\tiou\tlpips"]
        for r in self.rows:
            lines.append("\t".join([r.name, fmt(r.psnr), fmt(r.ssim), fmt(r.iou), fmt(r.lpips)]))
        iou = self.summary_iou if self.summary_iou is not None else self.mean("iou")
        lines.append("\t".join(["mean", fmt(self.mean("psnr")), fmt(self.mean("ssim")), fmt(iou), fmt(self.mean("lpips"))]))
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @staticmethod
    def read(path) -> list[dict]:
        lines = Path(path).read_text().splitlines()
        keys = lines[0].split("\t")
        out = []
        for line in lines[1:]:
            vals = line.split("\t")
            out.append({k: (v if k == "image" else float(v)) for k, v in zip(keys, vals)})
        return out
