"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .data import SceneDataset
from .geometry import Camera


def check_image(image, name: str = "image") -> np.ndarray:
    """Return ``image`` as a finite float array of shape (H, W, 3) with values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_dataset(X, require_train: bool = True) -> SceneDataset:
    if not isinstance(X, SceneDataset):
        raise TypeError(f"expected a SceneDataset, got {type(X).__name__}")
    if require_train and not X.train_ids:
        raise ValueError("dataset has an empty training split")
    for i in X.train_ids:
        check_image(X.images[i], X.names[i])
    return X


def check_cameras(cameras) -> list[Camera]:
    if isinstance(cameras, Camera):
        return [cameras]
    cams = list(cameras)
    for c in cams:
        if not isinstance(c, Camera):
            raise TypeError(f"expected Camera objects, got {type(c).__name__}")
    return cams
