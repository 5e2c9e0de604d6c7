import math

import numpy as np
import pytest
import torch

from sfnerf.data import SyntheticSpec, generate_synthetic_scene
from sfnerf.encoding import EncodingConfig
from sfnerf.exceptions import CheckpointError, ConfigError, NumericError
from sfnerf.losses import LossWeights
from sfnerf.pipeline import ambiguous_fraction, decompose, evaluate_test_views, total_variation
from sfnerf.trainer import (
    SFNeRFModel,
    Trainer,
    TrainConfig,
    compute_objective,
    fit_test_embedding,
    load_checkpoint,
    lr_at,
    pixel_features,
    render_image,
    stream,
    temperature_at,
)

from conftest import tiny_config


@pytest.fixture(scope="module")
def clean_scene():
    spec = SyntheticSpec(num_train=3, num_test=1, height=24, width=24, quadrature=256, occluders_min=0, occluders_max=0)
    return generate_synthetic_scene(spec, seed=11)


def _eval_loss(trainer):
    data = trainer.data
    feats = pixel_features(trainer.backbone, data.rays.image_ids, data.pixel_index)
    out = compute_objective(trainer.model, data.rays, data.colors, feats, trainer.config.temperature_final, jitter=False)
    return float(out.loss.detach())


def _blocks_equal(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k]), k


def test_defaults_match_reported_architecture():
    cfg = TrainConfig()
    assert (cfg.field_depth, cfg.field_width, cfg.color_width) == (8, 256, 128)
    assert (cfg.filter_depth, cfg.filter_width, cfg.adapter_width) == (5, 128, 128)
    assert (cfg.appearance_dim, cfg.transient_dim) == (48, 128)
    assert cfg.loss.beta_min == 0.1


def test_config_dict_roundtrip_and_strictness():
    cfg = tiny_config(loss=LossWeights(lambda_smooth=0.2))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"loss": {"lambda_bogus": 1}})
    with pytest.raises(ConfigError):
        tiny_config(transient_mode="nope")


def test_schedules():
    cfg = tiny_config(num_steps=100, lr=1e-2, lr_final=1e-4)
    assert temperature_at(cfg, 0) == 0.5 and temperature_at(cfg, 100) == 0.25
    assert abs(temperature_at(cfg, 50) - 0.375) < 1e-15
    assert lr_at(cfg, 0) == 1e-2 and abs(lr_at(cfg, 100) - 1e-4) < 1e-18
    assert abs(lr_at(cfg, 50) - 1e-3) < 1e-15


def test_streams_are_keyed():
    a = torch.rand(4, generator=stream(0, 5, "batch"))
    assert torch.equal(a, torch.rand(4, generator=stream(0, 5, "batch")))
    assert not torch.equal(a, torch.rand(4, generator=stream(0, 6, "batch")))
    assert not torch.equal(a, torch.rand(4, generator=stream(0, 5, "fine")))
    assert not torch.equal(a, torch.rand(4, generator=stream(1, 5, "batch")))


def test_smoke_training_reduces_loss(clean_scene):
    tr = Trainer(tiny_config(num_steps=200, batch_size=128), clean_scene)
    before = _eval_loss(tr)
    tr.run()
    after = _eval_loss(tr)
    assert after < before


def test_same_seed_gives_identical_checkpoints(tmp_path, tiny_scene):
    a = Trainer(tiny_config(), tiny_scene).run()
    b = Trainer(tiny_config(), tiny_scene).run()
    a.save(tmp_path / "a.ck")
    b.save(tmp_path / "b.ck")
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()


def test_resume_equals_uninterrupted(tmp_path, tiny_scene):
    cfg = tiny_config(num_steps=4)
    full = Trainer(cfg, tiny_scene).run()
    half = Trainer(cfg, tiny_scene).run(2)
    half.save(tmp_path / "half.ck")
    resumed = Trainer.from_checkpoint(tmp_path / "half.ck", tiny_scene).run(2)
    assert resumed.step == 4
    a, b = full.state_blocks(), resumed.state_blocks()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_allclose(a[k].double().numpy(), b[k].double().numpy(), atol=1e-6, rtol=0)


def test_save_load_save_bytes(tmp_path, tiny_scene):
    tr = Trainer(tiny_config(num_steps=2), tiny_scene).run()
    tr.save(tmp_path / "a.ck")
    again = Trainer.from_checkpoint(tmp_path / "a.ck", tiny_scene)
    again.save(tmp_path / "b.ck")
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()


def test_mismatched_encoding_rejected(tmp_path, tiny_scene):
    cfg = tiny_config()
    Trainer(cfg, tiny_scene).save(tmp_path / "a.ck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.ck", expect_config=tiny_config(encoding=EncodingConfig(L_x=6)))


def test_bad_magic_and_version(tmp_path, tiny_scene):
    Trainer(tiny_config(), tiny_scene).save(tmp_path / "a.ck")
    raw = bytearray((tmp_path / "a.ck").read_bytes())
    (tmp_path / "b.ck").write_bytes(b"X" + bytes(raw[1:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "b.ck")
    raw[8] = 9
    (tmp_path / "c.ck").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "c.ck")


def test_zero_step_checkpoint_is_initialisation(tmp_path, tiny_scene):
    cfg = tiny_config()
    tr = Trainer(cfg, tiny_scene)
    tr.save(tmp_path / "a.ck")
    fresh = SFNeRFModel(cfg, 3, tr.model.field.scene_scale, backbone_dim=cfg.backbone_dim)
    ck = load_checkpoint(tmp_path / "a.ck")
    _blocks_equal({k[6:]: v for k, v in ck.blocks.items() if k.startswith("model/")}, fresh.state_dict())
    assert not any(k.startswith("optim/") for k in ck.blocks)


def test_untouched_embedding_rows_do_not_move(tiny_scene):
    """SparseAdam only updates rows that were in the batch."""
    cfg = tiny_config(num_steps=1, batch_size=4)
    tr = Trainer(cfg, tiny_scene)
    before = tr.model.appearance.weight.detach().clone()
    rows = None
    g = stream(cfg.seed, 0, "batch")
    idx = torch.randint(len(tr.data), (cfg.batch_size,), generator=g)
    rows = set(tr.data.rays.image_ids[idx].tolist())
    tr.train_step()
    after = tr.model.appearance.weight.detach()
    for r in range(3):
        assert torch.equal(before[r], after[r]) == (r not in rows)


def test_nonfinite_loss_raises(tiny_scene):
    tr = Trainer(tiny_config(), tiny_scene)
    with torch.no_grad():
        tr.model.field.density_head.bias.fill_(float("nan"))
    with pytest.raises(NumericError):
        tr.train_step()


@pytest.fixture(scope="module")
def trained_clean(clean_scene):
    return Trainer(tiny_config(num_steps=150, batch_size=128, test_steps=120, test_lr=0.05), clean_scene).run()


def test_fit_embedding_freezes_model(trained_clean, clean_scene):
    model = trained_clean.model
    before = {k: v.clone() for k, v in model.state_dict().items()}
    flags = [p.requires_grad for p in model.parameters()]
    fit_test_embedding(model, clean_scene.images[3], clean_scene.cameras[3], steps=3)
    _blocks_equal(before, model.state_dict())
    assert flags == [p.requires_grad for p in model.parameters()]


def test_fit_embedding_self_consistency(trained_clean, clean_scene):
    """Refitting a training image's code from scratch gets within 10% of its trained error."""
    model = trained_clean.model
    img = clean_scene.images[1]
    cam = clean_scene.cameras[1]
    w = img.shape[1]

    def left_error(code):
        out = render_image(model, cam, code)["static"].numpy()
        return float(np.mean((out[:, : w // 2] - img[:, : w // 2]) ** 2))

    trained = left_error(model.appearance.weight[1].detach())
    fitted = left_error(fit_test_embedding(model, img, cam))
    assert fitted <= 1.1 * trained


def test_fit_uses_only_left_half(trained_clean, clean_scene):
    model = trained_clean.model
    img = clean_scene.images[3].copy()
    a = fit_test_embedding(model, img, clean_scene.cameras[3], steps=5)
    img[:, 12:] = np.random.default_rng(0).uniform(size=img[:, 12:].shape)
    b = fit_test_embedding(model, img, clean_scene.cameras[3], steps=5)
    assert torch.equal(a, b)


def test_metrics_only_use_right_half(trained_clean, clean_scene):
    import copy

    rep_a, _ = evaluate_test_views(trained_clean.model, clean_scene, steps=3)
    altered = copy.copy(clean_scene)
    altered.clean = [c.copy() for c in clean_scene.clean]
    altered.clean[3][:, :12] = 0.0
    rep_b, _ = evaluate_test_views(trained_clean.model, altered, steps=3)
    assert rep_a.rows[0].psnr == rep_b.rows[0].psnr and rep_a.rows[0].ssim == rep_b.rows[0].ssim
    altered.clean[3][:, 12:] = 0.0
    rep_c, _ = evaluate_test_views(trained_clean.model, altered, steps=3)
    assert rep_c.rows[0].psnr != rep_a.rows[0].psnr


def test_decompose_consistency(trained_clean, clean_scene):
    maps = decompose(trained_clean.model, clean_scene, trained_clean.data.ids, 0)
    assert set(maps) == {"static", "transient", "opacity", "uncertainty", "blended"}
    a = maps["opacity"][..., None]
    np.testing.assert_allclose(maps["blended"], a * maps["transient"] + (1 - a) * maps["static"], atol=1e-6)
    assert np.all(maps["uncertainty"] >= 0.1 - 1e-7)
    with pytest.raises(KeyError, match="valid ids"):
        decompose(trained_clean.model, clean_scene, trained_clean.data.ids, 3)


def test_off_mode_decomposition_is_static(clean_scene):
    tr = Trainer(tiny_config(transient_mode="off"), clean_scene).run()
    maps = decompose(tr.model, clean_scene, tr.data.ids, 0)
    assert np.all(maps["opacity"] == 0)
    np.testing.assert_array_equal(maps["static"], maps["blended"])


def test_off_mode_matches_reference_baseline(tiny_scene):
    loss = LossWeights(lambda_smooth=0.0, lambda_alpha=0.0)
    a = Trainer(tiny_config(transient_mode="off", loss=loss), tiny_scene).run()
    b = Trainer(tiny_config(transient_mode="mipnerf", loss=loss), tiny_scene).run()
    _blocks_equal(a.state_blocks(), b.state_blocks())


def test_sigmoid_mode_trains(tiny_scene):
    tr = Trainer(tiny_config(transient_mode="sigmoid"), tiny_scene).run()
    assert all(math.isfinite(v) for v in tr.train_step().values())


def test_opacity_statistics():
    assert ambiguous_fraction(np.array([0.0, 0.04, 0.5, 0.96, 1.0])) == 0.2
    a = np.zeros((4, 4))
    a[:, 2:] = 1
    assert total_variation(a) == pytest.approx(1 / 3)


def test_objective_value_does_not_depend_on_grad_mode(tiny_scene):
    """The smoothness term is computed even under ``torch.no_grad``."""
    tr = Trainer(tiny_config(dtype="float64", loss=LossWeights(lambda_smooth=0.1)), tiny_scene)
    with_grad = _eval_loss(tr)
    with torch.no_grad():
        without = _eval_loss(tr)
    np.testing.assert_allclose(without, with_grad, rtol=1e-12)
