"""Joint optimisation of the static field, the transient branch and the per-image embeddings."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .data import SceneDataset
from .encoding import EncodingConfig
from .exceptions import CheckpointError, ConfigError, IngestionError, NumericError
from .filternet import (
    ConvEncoder,
    FeatureAdapter,
    FilterNet,
    PrecomputedFeatures,
    TransientOutput,
    blend,
    logistic_noise,
    sample_transient_opacity,
)
from .geometry import Rays, hierarchical_resample, stratified_sample
from .losses import LossWeights, coarse_loss, smoothness_loss, sparsity_loss, squared_error, total_loss, transient_loss
from .static_field import StaticField, init_linear_, render_ray

log = logging.getLogger(__name__)

TRANSIENT_MODES = ("concrete", "sigmoid", "off", "mipnerf")
FEATURE_SOURCES = ("encoder", "files")
CHECKPOINT_MAGIC = b"SFNERFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    num_coarse: int = 64
    num_fine: int = 64
    batch_size: int = 1024
    num_steps: int = 20000
    lr: float = 5e-4
    lr_final: float = 5e-5
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    temperature_final: float = 0.25
    # "concrete": full model; "sigmoid": opacity head without the Concrete relaxation;
    # "off": transient branch disabled (opacity 0, unit uncertainty);
    # "mipnerf": independent reference objective of the latent-conditional baseline.
    transient_mode: str = "concrete"
    feature_source: str = "encoder"
    train_backbone: bool = False
    appearance_dim: int = 48
    transient_dim: int = 128
    field_depth: int = 8
    field_width: int = 256
    field_skip: int | None = 4
    color_width: int = 128
    filter_depth: int = 5
    filter_width: int = 128
    adapter_width: int = 128
    backbone_dim: int = 32
    embedding_std: float = 0.01
    resample_padding: float = 0.01
    scene_scale: float | None = None  # None: fit the sampled region into the unit cube
    dtype: str = "float32"
    chunk: int = 4096  # rays per forward pass when rendering full images
    test_steps: int = 200
    test_lr: float = 0.01

    def __post_init__(self):
        for name in ("num_coarse", "num_fine", "batch_size", "appearance_dim", "transient_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_steps < 0:
            raise ConfigError("num_steps must be >= 0")
        if self.transient_mode not in TRANSIENT_MODES:
            raise ConfigError(f"transient_mode must be one of {TRANSIENT_MODES}")
        if self.feature_source not in FEATURE_SOURCES:
            raise ConfigError(f"feature_source must be one of {FEATURE_SOURCES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not self.temperature_final > 0:
            raise ConfigError("temperature_final must be > 0")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = _strict(LossWeights, d["loss"], "loss")
        if "encoding" in d and isinstance(d["encoding"], dict):
            d["encoding"] = _strict(EncodingConfig, d["encoding"], "encoding")
        return cls(**d)


def _strict(cls, d: dict, section: str):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**d)


def temperature_at(config: TrainConfig, step: int) -> float:
    """Linear anneal from ``loss.temperature`` to ``temperature_final`` over the run."""
    frac = min(1.0, step / max(1, config.num_steps))
    return config.loss.temperature + (config.temperature_final - config.loss.temperature) * frac


def lr_at(config: TrainConfig, step: int) -> float:
    frac = min(1.0, step / max(1, config.num_steps))
    return config.lr * (config.lr_final / config.lr) ** frac


def stream(seed: int, step: int, name: str) -> torch.Generator:
    """Independent generator keyed by ``(seed, step, name)``; step -1 is reserved for initialisation."""
    key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    state = np.random.SeedSequence([seed, step + 1, key]).generate_state(2, dtype=np.uint32)
    g = torch.Generator()
    g.manual_seed(int(state[0]) << 31 | int(state[1]) >> 1)
    return g


def auto_scene_scale(dataset: SceneDataset, ids) -> float:
    """Scale mapping every ray segment ``[near, far]`` of the corner pixels into the unit ball (times 0.95).

    The frequency encodings are 2-periodic, so sampled points must stay
    inside ``(-1, 1)^3`` to be distinguishable.
    """
    radius = 0.0
    for i in ids:
        cam = dataset.cameras[i]
        corners = np.array([[0, 0], [0, cam.width - 1], [cam.height - 1, 0], [cam.height - 1, cam.width - 1]])
        from .geometry import generate_rays

        r = generate_rays(cam, corners)
        for t in (cam.near, cam.far):
            pts = r.origins + t * r.directions
            radius = max(radius, float(pts.norm(dim=-1).max()))
        radius = max(radius, float(np.linalg.norm(cam.center)))
    return 0.95 / radius


# --------------------------------------------------------------------------
# Model


class SFNeRFModel(nn.Module):
    """All trainable state: field, embedding tables, feature backbone/adapter and filter."""

    def __init__(self, config: TrainConfig, num_images: int, scene_scale: float, backbone_dim: int | None = None):
        super().__init__()
        self.config = config
        enc = config.encoding
        self.field = StaticField(
            L_x=enc.L_x,
            L_d=enc.L_d,
            appearance_dim=config.appearance_dim,
            depth=config.field_depth,
            width=config.field_width,
            color_width=config.color_width,
            skip=config.field_skip,
            scene_scale=scene_scale,
        )
        self.appearance = nn.Embedding(num_images, config.appearance_dim, sparse=True)
        self.transient = nn.Embedding(num_images, config.transient_dim, sparse=True)
        bdim = backbone_dim if backbone_dim is not None else config.backbone_dim
        self.encoder = ConvEncoder(feature_dim=bdim) if config.feature_source == "encoder" else None
        self.adapter = FeatureAdapter(bdim, width=config.adapter_width)
        self.filter = FilterNet(
            L_p=enc.L_p,
            transient_dim=config.transient_dim,
            feature_dim=config.adapter_width,
            depth=config.filter_depth,
            width=config.filter_width,
            beta_min=config.loss.beta_min,
            opacity_head="sigmoid" if config.transient_mode == "sigmoid" else "softplus",
        )
        self.reset_parameters(config.seed)
        self.to(config.torch_dtype)

    @property
    def num_images(self) -> int:
        return self.appearance.num_embeddings

    def reset_parameters(self, seed: int) -> None:
        # Each component draws from its own stream so toggling one leaves the others unchanged.
        init_linear_(self.field, stream(seed, -1, "init/field"))
        g = stream(seed, -1, "init/embeddings")
        with torch.no_grad():
            self.appearance.weight.copy_(torch.randn(self.appearance.weight.shape, generator=g, dtype=torch.float64) * self.config.embedding_std)
            g = stream(seed, -1, "init/transient")
            self.transient.weight.copy_(torch.randn(self.transient.weight.shape, generator=g, dtype=torch.float64) * self.config.embedding_std)
        if self.encoder is not None:
            self.encoder.reset_parameters(stream(seed, -1, "init/encoder"))
        init_linear_(self.adapter, stream(seed, -1, "init/adapter"))
        init_linear_(self.filter, stream(seed, -1, "init/filter"))

    def lookup(self, table: nn.Embedding, rows: torch.Tensor) -> torch.Tensor:
        if rows.numel() and (rows.min() < 0 or rows.max() >= table.num_embeddings):
            raise IndexError(f"image row outside [0, {table.num_embeddings})")
        return table(rows)

    def static_params(self):
        return list(self.field.parameters())

    def transient_params(self):
        mods = [self.adapter, self.filter]
        if self.encoder is not None and self.config.train_backbone:
            mods.append(self.encoder)
        return [p for m in mods for p in m.parameters()]


@dataclass
class StaticRender:
    coarse: "object"
    fine: "object"
    coarse_density: torch.Tensor


def render_static(
    model: SFNeRFModel,
    rays: Rays,
    appearance: torch.Tensor,
    jitter: bool = False,
    generators: tuple | None = None,
) -> StaticRender:
    """Coarse stratified pass, then a fine pass on the importance-resampled intervals (one shared MLP)."""
    cfg = model.config
    g_strat, g_fine = generators if generators is not None else (None, None)
    coarse_s = stratified_sample(rays, cfg.num_coarse, jitter=jitter, generator=g_strat)
    coarse_r = model.field(coarse_s, rays.directions, appearance)
    coarse = render_ray(coarse_s, coarse_r.density, coarse_r.color)
    fine_s = hierarchical_resample(
        rays, coarse_s, coarse.weights, cfg.num_fine, deterministic=not jitter, generator=g_fine,
        padding=cfg.resample_padding,
    )
    fine_r = model.field(fine_s, rays.directions, appearance)
    fine = render_ray(fine_s, fine_r.density, fine_r.color)
    return StaticRender(coarse=coarse, fine=fine, coarse_density=coarse_r.density)


# --------------------------------------------------------------------------
# Training data


class TrainingSet:
    """Training pixels of a dataset, flattened, with their rays and backbone features."""

    def __init__(self, dataset: SceneDataset, config: TrainConfig, ids: list[int] | None = None):
        self.dataset = dataset
        self.ids = list(dataset.train_ids if ids is None else ids)
        if not self.ids:
            raise IngestionError("dataset has no training images")
        dtype = config.torch_dtype
        rays, colors, rows, pix = [], [], [], []
        for row, i in enumerate(self.ids):
            r = dataset.rays(i, dtype=dtype)
            r.image_ids = torch.full_like(r.image_ids, row)
            rays.append(r)
            colors.append(torch.as_tensor(dataset.images[i].reshape(-1, 3), dtype=dtype))
            cam = dataset.cameras[i]
            rr, cc = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
            pix.append(torch.as_tensor(np.stack([rr.ravel(), cc.ravel()], -1)))
        self.rays = Rays.cat(rays)
        self.colors = torch.cat(colors)
        self.pixel_index = torch.cat(pix)
        self.images = [torch.as_tensor(dataset.images[i], dtype=dtype) for i in self.ids]
        self.features_source = None

    def __len__(self):
        return len(self.colors)

    def backbone(self, config: TrainConfig, model: SFNeRFModel):
        """Per-image backbone features; ``None`` entries are recomputed each step (trainable backbone)."""
        if config.feature_source == "files":
            if self.dataset.feature_dir is None:
                raise IngestionError("feature_source='files' but the dataset has no features/ directory")
            src = PrecomputedFeatures(self.dataset.feature_dir, self.dataset.names)
            return lambda row: src(self.images[row], self.ids[row])
        if config.train_backbone:
            return lambda row: model.encoder(self.images[row])
        cache = {}

        def frozen(row):
            if row not in cache:
                with torch.no_grad():
                    cache[row] = model.encoder(self.images[row])
            return cache[row]

        return frozen


def pixel_features(backbone, rows: torch.Tensor, pixel_index: torch.Tensor) -> torch.Tensor:
    out = None
    for row in torch.unique(rows).tolist():
        sel = rows == row
        fmap = backbone(row)
        vals = fmap[pixel_index[sel, 0], pixel_index[sel, 1]]
        if out is None:
            out = vals.new_zeros((len(rows), fmap.shape[-1]))
        out = out.index_put((torch.nonzero(sel).flatten(),), vals)
    return out


# --------------------------------------------------------------------------
# Objective


@dataclass
class StepOutput:
    loss: torch.Tensor
    terms: dict
    static_color: torch.Tensor
    blended: torch.Tensor
    opacity: torch.Tensor


def compute_objective(
    model: SFNeRFModel,
    rays: Rays,
    target: torch.Tensor,
    features: torch.Tensor | None,
    temperature: float,
    jitter: bool,
    generators: dict | None = None,
) -> StepOutput:
    """Total loss over a ray batch.  ``generators=None`` means evaluation mode (no jitter, U = 0.5)."""
    cfg = model.config
    w = cfg.loss
    gens = generators or {}
    rows = rays.image_ids
    app = model.lookup(model.appearance, rows)
    render = render_static(model, rays, app, jitter=jitter, generators=(gens.get("strat"), gens.get("fine")))
    static = render.fine.color
    app_rows = model.lookup(model.appearance, torch.unique(rows))
    sparse = sparsity_loss(render.coarse_density)

    if cfg.transient_mode == "mipnerf":
        # Reference latent-conditional mip-NeRF objective, written independently of the transient path.
        per_ray = 0.5 * squared_error(static, target) + w.lambda_coarse * squared_error(render.coarse.color, target)
        per_ray = per_ray + w.lambda_sparse * sparse
        loss = per_ray.sum() + w.lambda_app * (app_rows**2).sum()
        zero = torch.zeros_like(static[:, 0])
        terms = {"total": loss.detach()}
        return StepOutput(loss, terms, static, static, zero)

    if cfg.transient_mode == "off":
        out = TransientOutput(
            alpha_param=torch.zeros_like(static[:, 0]),
            color=torch.zeros_like(static),
            beta=torch.ones_like(static[:, 0]),
        )
        alpha = out.alpha_param
        smooth = torch.zeros_like(alpha)
    else:
        # The smoothness term needs autograd even when the caller disabled it,
        # so the objective has the same value in both modes.
        grad_on = torch.is_grad_enabled()
        need_smooth = w.lambda_smooth > 0
        with torch.enable_grad() if need_smooth else contextlib.nullcontext():
            pixel_enc = model.filter.encode_pixels(rays.pixels)
            if need_smooth:
                pixel_enc = pixel_enc.detach().requires_grad_(True)
            feats = model.adapter(features)
            out = model.filter(pixel_enc, model.lookup(model.transient, rows), feats)
            if cfg.transient_mode == "concrete":
                noise = None
                if gens.get("concrete") is not None:
                    noise = logistic_noise(out.alpha_param.shape, gens["concrete"], dtype=out.alpha_param.dtype)
                alpha = sample_transient_opacity(out.alpha_param, temperature, noise)
            else:
                alpha = out.alpha_param
            if need_smooth:
                smooth = smoothness_loss(alpha, pixel_enc, cfg.encoding.L_p, create_graph=grad_on)
            else:
                smooth = torch.zeros_like(alpha)
        if not grad_on:
            out = TransientOutput(*(v.detach() for v in (out.alpha_param, out.color, out.beta)))
            alpha, smooth = alpha.detach(), smooth.detach()

    blended = blend(alpha, out.color, static)
    lt = transient_loss(blended, target, out.beta, alpha, w.lambda_alpha)
    lc = coarse_loss(alpha, render.coarse.color, target, detach_mask=w.detach_coarse_mask)
    loss, terms = total_loss(lt, lc, smooth, sparse, app_rows, w)
    return StepOutput(loss, terms, static, blended, alpha)


# --------------------------------------------------------------------------
# Optimisation


class Trainer:
    """Owns the model, optimisers and step counter for one training run."""

    def __init__(self, config: TrainConfig, dataset: SceneDataset, model: SFNeRFModel | None = None):
        self.config = config
        self.data = TrainingSet(dataset, config)
        if model is None:
            scale = config.scene_scale or auto_scene_scale(dataset, self.data.ids)
            bdim = None
            if config.feature_source == "files":
                if dataset.feature_dir is None:
                    raise IngestionError("feature_source='files' but the dataset has no features/ directory")
                bdim = PrecomputedFeatures(dataset.feature_dir, dataset.names).feature_dim
            model = SFNeRFModel(config, len(self.data.ids), scale, backbone_dim=bdim)
        if model.num_images != len(self.data.ids):
            raise IngestionError(f"model has {model.num_images} embedding rows, dataset has {len(self.data.ids)} training images")
        self.model = model
        self.step = 0
        dense = list(model.field.parameters())
        if config.transient_mode in ("concrete", "sigmoid"):
            dense += model.transient_params()
        self.dense_opt = torch.optim.Adam(dense, lr=config.lr)
        tables = [model.appearance.weight]
        if config.transient_mode in ("concrete", "sigmoid"):
            tables.append(model.transient.weight)
        self.sparse_opt = torch.optim.SparseAdam(tables, lr=config.lr)
        self.backbone = self.data.backbone(config, model)

    def train_step(self) -> dict:
        cfg = self.config
        step = self.step
        g = {name: stream(cfg.seed, step, name) for name in ("batch", "strat", "fine", "concrete")}
        idx = torch.randint(len(self.data), (cfg.batch_size,), generator=g["batch"])
        rays = self.data.rays[idx]
        target = self.data.colors[idx]
        feats = None
        if cfg.transient_mode in ("concrete", "sigmoid"):
            feats = pixel_features(self.backbone, rays.image_ids, self.data.pixel_index[idx])
        out = compute_objective(self.model, rays, target, feats, temperature_at(cfg, step), jitter=True, generators=g)
        for name, value in out.terms.items():
            if not torch.isfinite(value):
                raise NumericError(f"non-finite {name} loss at step {step}", step=step, term=name)

        lr = lr_at(cfg, step)
        for opt in (self.dense_opt, self.sparse_opt):
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
        out.loss.backward()
        self.dense_opt.step()
        self.sparse_opt.step()
        self.step += 1
        return {k: float(v) for k, v in out.terms.items()}

    def run(self, num_steps: int | None = None, callback: Callable[[int, dict, "Trainer"], None] | None = None):
        end = self.config.num_steps if num_steps is None else self.step + num_steps
        while self.step < end:
            terms = self.train_step()
            if callback is not None:
                callback(self.step - 1, terms, self)
        return self

    # -- checkpoints ------------------------------------------------------

    def state_blocks(self) -> dict[str, torch.Tensor]:
        blocks = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        names = {id(p): n for n, p in self.model.named_parameters()}
        for tag, opt in (("dense", self.dense_opt), ("sparse", self.sparse_opt)):
            for p in opt.param_groups[0]["params"]:
                st = opt.state.get(p)
                if not st:
                    continue
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    blocks[f"optim/{tag}/{names[id(p)]}/{key}"] = torch.as_tensor(st[key])
        return blocks

    def save(self, path, extra_meta: dict | None = None) -> Path:
        """Write a checkpoint; ``extra_meta`` (JSON-serialisable) is stored under ``meta["run"]``."""
        meta = {
            "step": self.step,
            "scene_scale": self.model.field.scene_scale,
            "num_images": self.model.num_images,
            "backbone_dim": self.model.adapter.layers[0].in_features,
            "train_ids": self.data.ids,
            "names": [self.data.dataset.names[i] for i in self.data.ids],
        }
        if extra_meta is not None:
            meta["run"] = extra_meta
        return save_checkpoint(path, self.config, meta, self.state_blocks())

    @classmethod
    def from_checkpoint(cls, path, dataset: SceneDataset, expect_config: TrainConfig | None = None) -> "Trainer":
        ck = load_checkpoint(path, expect_config)
        cfg, meta = ck.config, ck.meta
        ids = meta["train_ids"]
        if list(dataset.train_ids) != ids:
            raise CheckpointError(f"checkpoint was trained on images {ids}, dataset split is {dataset.train_ids}")
        model = ck.build_model()
        trainer = cls(cfg, dataset, model)
        trainer.step = meta["step"]
        names = {n: p for n, p in model.named_parameters()}
        for tag, opt in (("dense", trainer.dense_opt), ("sparse", trainer.sparse_opt)):
            for p in opt.param_groups[0]["params"]:
                name = [n for n, q in names.items() if q is p][0]
                prefix = f"optim/{tag}/{name}/"
                if prefix + "step" in ck.blocks:
                    st = {k: ck.blocks[prefix + k].clone() for k in ("step", "exp_avg", "exp_avg_sq")}
                    if tag == "sparse":
                        st["step"] = int(st["step"])  # SparseAdam keeps a Python int
                    opt.state[p] = st
        return trainer


# --------------------------------------------------------------------------
# Checkpoint container
#
# Layout (all integers little-endian):
#   8 bytes  magic b"SFNERFCK"
#   u32      format version
#   u64      header length in bytes
#   header   UTF-8 JSON, sorted keys: {"config": ..., "meta": ..., "blocks": [
#                {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
#   data     raw little-endian tensor bytes, blocks in header order; offsets are
#            relative to the start of the data section


@dataclass
class Checkpoint:
    config: TrainConfig
    meta: dict
    blocks: dict[str, torch.Tensor]

    def build_model(self) -> SFNeRFModel:
        model = SFNeRFModel(
            self.config, self.meta["num_images"], self.meta["scene_scale"], backbone_dim=self.meta["backbone_dim"]
        )
        state = {k[len("model/"):]: v for k, v in self.blocks.items() if k.startswith("model/")}
        model.load_state_dict(state, strict=True)
        return model


_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def save_checkpoint(path, config: TrainConfig, meta: dict, blocks: dict[str, torch.Tensor]) -> Path:
    path = Path(path)
    index, payload, offset = [], [], 0
    for name in sorted(blocks):
        t = blocks[name].detach().contiguous().cpu()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise CheckpointError(f"cannot store dtype {dtype} ({name})")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<")).tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config.to_dict(), "meta": meta, "blocks": index}, sort_keys=True, separators=(",", ":"))
    hb = header.encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        for raw in payload:
            fh.write(raw)
    return path


def load_checkpoint(path, expect_config: TrainConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}")
    header = json.loads(raw[20 : 20 + hlen])
    config = TrainConfig.from_dict(header["config"])
    if expect_config is not None and expect_config.encoding != config.encoding:
        raise CheckpointError(f"encoding config mismatch: checkpoint {config.encoding}, expected {expect_config.encoding}")
    base = 20 + hlen
    blocks = {}
    for b in header["blocks"]:
        start = base + b["offset"]
        np_dtype = np.dtype(str(_DTYPES[b["dtype"]]).replace("torch.", "")).newbyteorder("<")
        arr = np.frombuffer(raw, dtype=np_dtype, count=math.prod(b["shape"]) if b["shape"] else 1, offset=start)
        blocks[b["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).reshape(b["shape"])
    return Checkpoint(config=config, meta=header["meta"], blocks=blocks)


# --------------------------------------------------------------------------
# Top level entry points


class ScalarLog:
    """Append-only ``step<TAB>term<TAB>value`` rows."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            self.path.write_text("step\tterm\tvalue\n")

    def write(self, step: int, terms: dict) -> None:
        with open(self.path, "a") as fh:
            for name in sorted(terms):
                fh.write(f"{step}\t{name}\t{terms[name]:.9g}\n")


def train(config: TrainConfig, dataset: SceneDataset, callback=None) -> Trainer:
    return Trainer(config, dataset).run(callback=callback)


def render_image(
    model: SFNeRFModel,
    camera,
    appearance: torch.Tensor,
    row: int | None = None,
    features: torch.Tensor | None = None,
    pixels=None,
) -> dict[str, torch.Tensor]:
    """Deterministic render of a full image (or the given ``(row, col)`` pixels).

    Static color is always produced.  When ``row`` names a training image and
    the transient branch is active, the decomposition (transient color,
    opacity, uncertainty, blended color) is added.
    """
    from .geometry import generate_rays

    cfg = model.config
    dtype = cfg.torch_dtype
    rays = generate_rays(camera, pixels, image_id=row or 0, dtype=dtype)
    if pixels is None:
        rr, cc = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
        pix = torch.as_tensor(np.stack([rr.ravel(), cc.ravel()], -1))
    else:
        pix = torch.as_tensor(np.asarray(pixels))
    want_transient = row is not None and cfg.transient_mode in ("concrete", "sigmoid") and features is not None
    outs: dict[str, list] = {}
    with torch.no_grad():
        for s in range(0, len(rays), cfg.chunk):
            r = rays[s : s + cfg.chunk]
            app = appearance.to(dtype).expand(len(r), -1)
            res = render_static(model, r, app)
            outs.setdefault("static", []).append(res.fine.color)
            if want_transient:
                f = model.adapter(features[pix[s : s + cfg.chunk, 0], pix[s : s + cfg.chunk, 1]])
                code = model.transient.weight[row].expand(len(r), -1)
                t = model.filter(model.filter.encode_pixels(r.pixels), code, f)
                if cfg.transient_mode == "concrete":
                    alpha = sample_transient_opacity(t.alpha_param, cfg.temperature_final)
                else:
                    alpha = t.alpha_param
                outs.setdefault("transient", []).append(t.color)
                outs.setdefault("opacity", []).append(alpha)
                outs.setdefault("uncertainty", []).append(t.beta)
                outs.setdefault("blended", []).append(blend(alpha, t.color, res.fine.color))
    result = {k: torch.cat(v) for k, v in outs.items()}
    if pixels is None:
        h, w = camera.height, camera.width
        result = {k: v.reshape(h, w, *v.shape[1:]) for k, v in result.items()}
    return result


def fit_test_embedding(
    model: SFNeRFModel,
    image: np.ndarray,
    camera,
    steps: int | None = None,
    lr: float | None = None,
    image_id: str | int = "?",
    columns: slice | None = None,
) -> torch.Tensor:
    """Fit a fresh appearance code to the left half of ``image`` with everything else frozen.

    Starts from the mean training code and minimises the plain squared error
    of the deterministic static render on columns ``[0, W // 2)``.
    """
    cfg = model.config
    steps = cfg.test_steps if steps is None else steps
    lr = cfg.test_lr if lr is None else lr
    h, w = image.shape[:2]
    cols = columns or slice(0, w // 2)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w)[cols], indexing="ij")
    pixels = np.stack([rr.ravel(), cc.ravel()], -1)
    from .geometry import generate_rays

    dtype = cfg.torch_dtype
    rays = generate_rays(camera, pixels, dtype=dtype)
    target = torch.as_tensor(image[rr.ravel(), cc.ravel()], dtype=dtype)
    code = model.appearance.weight.detach().mean(0).clone().requires_grad_(True)
    opt = torch.optim.Adam([code], lr=lr)
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        for _ in range(steps):
            opt.zero_grad()
            loss = 0.0
            for s in range(0, len(rays), cfg.chunk):
                r = rays[s : s + cfg.chunk]
                res = render_static(model, r, code.expand(len(r), -1))
                part = squared_error(res.fine.color, target[s : s + cfg.chunk]).sum()
                part.backward()
                loss += float(part.detach())
            if not math.isfinite(loss):
                raise NumericError(f"embedding fit diverged for image {image_id}", image_id=image_id)
            opt.step()
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
    return code.detach()
