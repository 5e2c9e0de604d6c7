import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sfnerf.estimator import SFNeRF
from sfnerf.validation import check_cameras, check_dataset, check_image

from conftest import tiny_config


def _small(**kw):
    return SFNeRF.from_config(tiny_config(**kw))


def test_params_roundtrip():
    est = _small()
    assert est.to_config() == tiny_config()
    params = est.get_params()
    assert params["lambda_smooth"] == 0.01 and params["L_p"] == 10
    est.set_params(lambda_smooth=0.5, L_p=6)
    cfg = est.to_config()
    assert cfg.loss.lambda_smooth == 0.5 and cfg.encoding.L_p == 6


def test_clone_keeps_params():
    est = SFNeRF(num_steps=7, transient_mode="sigmoid")
    c = clone(est)
    assert c.get_params() == est.get_params()


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SFNeRF().transform()


def test_input_validation():
    with pytest.raises(TypeError):
        SFNeRF().fit(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        check_image(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        check_image(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        check_image(np.full((2, 2, 3), np.nan))
    with pytest.raises(TypeError):
        check_cameras([object()])


def test_fit_predict_transform(tiny_scene, tmp_path):
    est = SFNeRF.from_config(tiny_config(num_steps=3))
    assert est.fit(check_dataset(tiny_scene)) is est
    assert est.n_steps_ == 3
    cams = [tiny_scene.cameras[i] for i in tiny_scene.test_ids]
    imgs = est.predict(cams)
    assert imgs.shape == (1, 16, 16, 3)
    np.testing.assert_array_equal(est.predict(cams[0], appearance=0).shape, (1, 16, 16, 3))
    with pytest.raises(KeyError):
        est.predict(cams, appearance=3)
    op = est.transform()
    assert op.shape == (3, 16, 16)
    assert np.all((op >= 0) & (op <= 1))
    est.save(tmp_path / "m.ck")
    back = SFNeRF.load(tmp_path / "m.ck", tiny_scene)
    assert back.get_params() == est.get_params()
    np.testing.assert_array_equal(back.predict(cams), imgs)


def test_score_is_mean_right_half_psnr():
    from sfnerf.data import SyntheticSpec, generate_synthetic_scene
    from sfnerf.pipeline import evaluate_test_views

    scene = generate_synthetic_scene(SyntheticSpec(num_train=2, num_test=1, height=24, width=24, quadrature=64), seed=0)
    est = SFNeRF.from_config(tiny_config(num_steps=2)).fit(scene)
    report, _ = evaluate_test_views(est.model_, scene)
    assert est.score() == report.mean("psnr")
