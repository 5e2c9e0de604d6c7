"""scikit-learn style front end: ``SFNeRF().fit(dataset)``, then render, decompose and score."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SceneDataset
from .encoding import EncodingConfig
from .losses import LossWeights
from .pipeline import decompose, evaluate_test_views
from .trainer import Trainer, TrainConfig, fit_test_embedding, render_image
from .validation import check_cameras, check_dataset, check_image

_LOSS_KEYS = {f.name for f in fields(LossWeights)}
_ENC_KEYS = {f.name for f in fields(EncodingConfig)}


class SFNeRF(BaseEstimator):
    """Static/transient scene decomposition from a handful of photos.

    Every constructor argument is a flat :class:`TrainConfig` entry (loss
    weights and encoding degrees included), so ``get_params``/``set_params``
    and ``sklearn.base.clone`` work as usual.

    ``fit`` takes a :class:`SceneDataset` and trains on its training split.
    ``predict`` renders static novel views, ``transform`` returns the transient
    opacity map of every training image, ``score`` is the mean right-half PSNR
    on the test split after left-half appearance fitting.
    """

    def __init__(
        self,
        num_coarse=64,
        num_fine=64,
        batch_size=1024,
        num_steps=20000,
        lr=5e-4,
        lr_final=5e-5,
        seed=0,
        lambda_alpha=0.01,
        lambda_coarse=1.0,
        lambda_smooth=0.01,
        lambda_sparse=1e-4,
        lambda_app=0.01,
        temperature=0.5,
        temperature_final=0.25,
        beta_min=0.1,
        detach_coarse_mask=False,
        L_x=10,
        L_d=4,
        L_p=10,
        transient_mode="concrete",
        feature_source="encoder",
        train_backbone=False,
        appearance_dim=48,
        transient_dim=128,
        field_depth=8,
        field_width=256,
        field_skip=4,
        color_width=128,
        filter_depth=5,
        filter_width=128,
        adapter_width=128,
        backbone_dim=32,
        embedding_std=0.01,
        resample_padding=0.01,
        scene_scale=None,
        dtype="float32",
        chunk=4096,
        test_steps=200,
        test_lr=0.01,
    ):
        self.num_coarse = num_coarse
        self.num_fine = num_fine
        self.batch_size = batch_size
        self.num_steps = num_steps
        self.lr = lr
        self.lr_final = lr_final
        self.seed = seed
        self.lambda_alpha = lambda_alpha
        self.lambda_coarse = lambda_coarse
        self.lambda_smooth = lambda_smooth
        self.lambda_sparse = lambda_sparse
        self.lambda_app = lambda_app
        self.temperature = temperature
        self.temperature_final = temperature_final
        self.beta_min = beta_min
        self.detach_coarse_mask = detach_coarse_mask
        self.L_x = L_x
        self.L_d = L_d
        self.L_p = L_p
        self.transient_mode = transient_mode
        self.feature_source = feature_source
        self.train_backbone = train_backbone
        self.appearance_dim = appearance_dim
        self.transient_dim = transient_dim
        self.field_depth = field_depth
        self.field_width = field_width
        self.field_skip = field_skip
        self.color_width = color_width
        self.filter_depth = filter_depth
        self.filter_width = filter_width
        self.adapter_width = adapter_width
        self.backbone_dim = backbone_dim
        self.embedding_std = embedding_std
        self.resample_padding = resample_padding
        self.scene_scale = scene_scale
        self.dtype = dtype
        self.chunk = chunk
        self.test_steps = test_steps
        self.test_lr = test_lr

    # -- config round trip ---------------------------------------------------

    def to_config(self) -> TrainConfig:
        params = self.get_params()
        loss = LossWeights(**{k: params.pop(k) for k in _LOSS_KEYS})
        enc = EncodingConfig(**{k: params.pop(k) for k in _ENC_KEYS})
        return TrainConfig(loss=loss, encoding=enc, **params)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "SFNeRF":
        d = config.to_dict()
        flat = {**d.pop("loss"), **d.pop("encoding"), **d}
        return cls(**flat)

    # -- estimator API ---------------------------------------------------

    def fit(self, X: SceneDataset, y=None, callback=None):
        X = check_dataset(X)
        trainer = Trainer(self.to_config(), X)
        trainer.run(callback=callback)
        self._set_trainer(trainer, X)
        return self

    def _set_trainer(self, trainer: Trainer, dataset: SceneDataset):
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.train_ids_ = list(trainer.data.ids)
        self.dataset_ = dataset
        self.n_steps_ = trainer.step

    def transform(self, X: SceneDataset | None = None) -> np.ndarray:
        """Evaluation-mode transient opacity of every training image, ``(n_train, H, W)``."""
        check_is_fitted(self, "model_")
        X = self.dataset_ if X is None else check_dataset(X)
        return np.stack([decompose(self.model_, X, self.train_ids_, i)["opacity"] for i in self.train_ids_])

    def decompose(self, image_id: int, X: SceneDataset | None = None) -> dict[str, np.ndarray]:
        check_is_fitted(self, "model_")
        X = self.dataset_ if X is None else X
        return decompose(self.model_, X, self.train_ids_, image_id)

    def predict(self, cameras, appearance=None) -> np.ndarray:
        """Static renders ``(n, H, W, 3)``.

        ``appearance`` is a code (vector), a training image id, or ``None`` for
        the mean training code.
        """
        check_is_fitted(self, "model_")
        cams = check_cameras(cameras)
        code = self.appearance_code(appearance)
        return np.stack([render_image(self.model_, c, code)["static"].numpy() for c in cams])

    def appearance_code(self, appearance=None) -> torch.Tensor:
        table = self.model_.appearance.weight.detach()
        if appearance is None:
            return table.mean(0)
        if isinstance(appearance, (int, np.integer)):
            if appearance not in self.train_ids_:
                raise KeyError(f"image {appearance} is not a training image; valid ids: {self.train_ids_}")
            return table[self.train_ids_.index(appearance)]
        return torch.as_tensor(np.asarray(appearance), dtype=table.dtype)

    def fit_appearance(self, image, camera, steps=None) -> torch.Tensor:
        """Appearance code for an unseen photo, fitted on its left half."""
        check_is_fitted(self, "model_")
        return fit_test_embedding(self.model_, check_image(image), camera, steps=steps)

    def score(self, X: SceneDataset | None = None, y=None) -> float:
        check_is_fitted(self, "model_")
        X = self.dataset_ if X is None else X
        report, _ = evaluate_test_views(self.model_, X)
        return report.mean("psnr")

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "trainer_")
        return self.trainer_.save(path)

    @classmethod
    def load(cls, path, dataset: SceneDataset) -> "SFNeRF":
        trainer = Trainer.from_checkpoint(path, dataset)
        est = cls.from_config(trainer.config)
        est._set_trainer(trainer, dataset)
        return est
