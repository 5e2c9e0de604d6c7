"""Rendering, decomposition and evaluation of a trained model against a dataset."""

from __future__ import annotations

import numpy as np
import torch

from .data import SceneDataset
from .evaluation import MetricReport, occluder_iou, right_half
from .filternet import PrecomputedFeatures
from .trainer import SFNeRFModel, fit_test_embedding, render_image


def backbone_features(model: SFNeRFModel, dataset: SceneDataset, image_id: int) -> torch.Tensor:
    dtype = model.config.torch_dtype
    image = torch.as_tensor(dataset.images[image_id], dtype=dtype)
    with torch.no_grad():
        if model.config.feature_source == "files":
            return PrecomputedFeatures(dataset.feature_dir, dataset.names)(image, image_id)
        return model.encoder(image)


def decompose(model: SFNeRFModel, dataset: SceneDataset, train_ids: list[int], image_id: int) -> dict[str, np.ndarray]:
    """Static render, transient color, opacity, uncertainty and blended reconstruction of a training image."""
    if image_id not in train_ids:
        raise KeyError(f"image {image_id} is not a training image; valid ids: {train_ids}")
    row = train_ids.index(image_id)
    feats = backbone_features(model, dataset, image_id) if model.config.transient_mode in ("concrete", "sigmoid") else None
    out = render_image(model, dataset.cameras[image_id], model.appearance.weight[row].detach(), row=row, features=feats)
    if "opacity" not in out:
        static = out["static"]
        out["transient"] = torch.zeros_like(static)
        out["opacity"] = torch.zeros(static.shape[:2], dtype=static.dtype)
        out["uncertainty"] = torch.ones(static.shape[:2], dtype=static.dtype)
        out["blended"] = static.clone()
    return {k: v.numpy().astype(np.float64) for k, v in out.items()}


def ambiguous_fraction(opacity, low: float = 0.05, high: float = 0.95) -> float:
    """Fraction of opacity values strictly inside ``(low, high)``."""
    a = np.asarray(opacity)
    return float(np.mean((a > low) & (a < high)))


def total_variation(opacity) -> float:
    """Mean absolute difference between horizontally and vertically adjacent pixels."""
    a = np.asarray(opacity, dtype=np.float64)
    return float(np.abs(np.diff(a, axis=0)).mean() + np.abs(np.diff(a, axis=1)).mean())


def decomposition_stats(model: SFNeRFModel, dataset: SceneDataset, train_ids: list[int]) -> dict:
    ious, amb, tv, inside, outside = [], [], [], [], []
    for i in train_ids:
        maps = decompose(model, dataset, train_ids, i)
        a = maps["opacity"]
        amb.append(ambiguous_fraction(a))
        tv.append(total_variation(a))
        if dataset.masks is not None:
            m = np.asarray(dataset.masks[i], dtype=bool)
            ious.append(occluder_iou(a, m))
            if m.any():
                inside.append(a[m].mean())
            if (~m).any():
                outside.append(a[~m].mean())
    return {
        "iou": float(np.mean(ious)) if ious else None,
        "ambiguous": float(np.mean(amb)),
        "tv": float(np.mean(tv)),
        "opacity_in": float(np.mean(inside)) if inside else None,
        "opacity_out": float(np.mean(outside)) if outside else None,
    }


def reference_image(dataset: SceneDataset, image_id: int) -> np.ndarray:
    """Occluder-free reference when the dataset has one, else the photo itself."""
    if dataset.clean is not None:
        return dataset.clean[image_id]
    return dataset.images[image_id]


def evaluate_test_views(
    model: SFNeRFModel, dataset: SceneDataset, ids: list[int] | None = None, steps: int | None = None
) -> tuple[MetricReport, dict[int, np.ndarray]]:
    """Fit each test view's appearance code on its left half; score the right half of the static render."""
    ids = dataset.test_ids if ids is None else ids
    report = MetricReport()
    renders = {}
    for i in ids:
        ref = reference_image(dataset, i)
        cam = dataset.cameras[i]
        code = fit_test_embedding(model, dataset.images[i], cam, steps=steps, image_id=dataset.names[i])
        img = render_image(model, cam, code)["static"].numpy().astype(np.float64)
        renders[i] = img
        report.add(dataset.names[i], right_half(img), right_half(ref))
    return report, renders
