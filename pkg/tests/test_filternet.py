import numpy as np
import pytest
import torch

from sfnerf.exceptions import ConfigError, IngestionError, NumericError
from sfnerf.filternet import (
    ConvEncoder,
    FeatureAdapter,
    FilterNet,
    PrecomputedFeatures,
    blend,
    filter_forward,
    logistic_noise,
    read_feature_file,
    sample_transient_opacity,
    write_feature_file,
)
from sfnerf.static_field import init_linear_


def _net(gen, **kw):
    net = FilterNet(L_p=3, transient_dim=5, feature_dim=4, depth=3, width=16, **kw).double()
    init_linear_(net, gen)
    return net


def test_constant_image_gives_constant_features(gen):
    enc = ConvEncoder(feature_dim=6, hidden=8, depth=3).double()
    enc.reset_parameters(gen)
    image = torch.ones(12, 9, 3, dtype=torch.float64) * torch.tensor([0.2, 0.5, 0.9], dtype=torch.float64)
    feats = enc(image).detach()
    assert feats.shape == (12, 9, 6)
    np.testing.assert_allclose(feats.numpy(), np.broadcast_to(feats[0, 0].numpy(), feats.shape), atol=1e-14)


def test_feature_file_roundtrip(tmp_path, rng):
    feats = rng.standard_normal((7, 5, 3)).astype(np.float32)
    write_feature_file(tmp_path / "a.feat", feats)
    back = read_feature_file(tmp_path / "a.feat")
    assert back.tobytes() == feats.tobytes()


def test_truncated_feature_file(tmp_path):
    write_feature_file(tmp_path / "a.feat", np.zeros((2, 2, 2), np.float32))
    raw = (tmp_path / "a.feat").read_bytes()
    (tmp_path / "a.feat").write_bytes(raw[:-4])
    with pytest.raises(IngestionError):
        read_feature_file(tmp_path / "a.feat")


def test_precomputed_features_resized_and_checked(tmp_path, rng):
    write_feature_file(tmp_path / "v0.feat", rng.standard_normal((4, 4, 3)).astype(np.float32))
    write_feature_file(tmp_path / "v1.feat", rng.standard_normal((4, 6, 3)).astype(np.float32))
    src = PrecomputedFeatures(tmp_path, ["v0", "v1", "v2"])
    out = src(torch.zeros(8, 8, 3), 0)
    assert out.shape == (8, 8, 3)
    with pytest.raises(IngestionError, match="aspect"):
        src(torch.zeros(8, 8, 3), 1)
    with pytest.raises(IngestionError, match="missing"):
        src(torch.zeros(8, 8, 3), 2)


def test_zero_adapter_outputs_bias(gen):
    ad = FeatureAdapter(5, width=7).double()
    for layer in ad.layers:
        torch.nn.init.zeros_(layer.weight)
    torch.nn.init.uniform_(ad.layers[-1].bias, generator=gen)
    x = torch.randn(11, 5, dtype=torch.float64, generator=gen)
    out = ad(x).detach()
    np.testing.assert_array_equal(out.numpy(), np.broadcast_to(ad.layers[-1].bias.detach().numpy(), (11, 7)))


def test_beta_floor(gen):
    net = _net(gen, beta_min=0.1)
    with torch.no_grad():
        net.beta_out.bias.fill_(-200.0)
    out = filter_forward(net, torch.rand(64, 2, dtype=torch.float64, generator=gen), torch.randn(64, 5, dtype=torch.float64), torch.randn(64, 4, dtype=torch.float64))
    assert torch.all(out.beta >= 0.1)


def test_deterministic_and_conditioned(gen):
    net = _net(gen)
    p = torch.rand(16, 2, dtype=torch.float64, generator=gen)
    code = torch.randn(16, 5, dtype=torch.float64, generator=gen)
    f = torch.randn(16, 4, dtype=torch.float64, generator=gen)
    a, b = filter_forward(net, p, code, f), filter_forward(net, p, code, f)
    for x, y in zip((a.alpha_param, a.color, a.beta), (b.alpha_param, b.color, b.beta)):
        assert torch.equal(x, y)
    c = filter_forward(net, p, code + 1.0, f)
    assert not torch.allclose(a.alpha_param, c.alpha_param)


def test_nonfinite_input_rejected(gen):
    net = _net(gen)
    p = torch.full((2, 2), float("nan"), dtype=torch.float64)
    with pytest.raises(NumericError):
        filter_forward(net, p, torch.zeros(2, 5, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64))


def test_sigmoid_head_outputs_probabilities(gen):
    net = _net(gen, opacity_head="sigmoid")
    out = filter_forward(net, torch.rand(32, 2, dtype=torch.float64), torch.randn(32, 5, dtype=torch.float64), torch.randn(32, 4, dtype=torch.float64))
    assert torch.all((out.alpha_param > 0) & (out.alpha_param < 1))


@pytest.mark.parametrize("t", [0.1, 0.5, 2.0])
def test_eval_symmetric_point(t):
    assert float(sample_transient_opacity(torch.tensor([1.0], dtype=torch.float64), t)) == 0.5


def test_eval_low_temperature_limit():
    assert float(sample_transient_opacity(torch.tensor([2.0], dtype=torch.float64), 0.01)) > 1 - 1e-9


def test_eval_matches_formula(gen):
    a = torch.rand(100, dtype=torch.float64, generator=gen) * 5 + 0.01
    out = sample_transient_opacity(a, 0.37)
    assert torch.equal(out, torch.sigmoid(torch.log(a) / 0.37))


def test_nonpositive_temperature():
    with pytest.raises(ConfigError):
        sample_transient_opacity(torch.ones(1), 0.0)


@pytest.mark.parametrize("alpha_loc", [0.25, 1.0, 4.0])
@pytest.mark.parametrize("t", [0.5, 0.25])
def test_concrete_threshold_probability(alpha_loc, t, gen):
    n = 100_000
    noise = logistic_noise((n,), generator=gen)
    a = sample_transient_opacity(torch.full((n,), alpha_loc, dtype=torch.float64), t, noise)
    p = alpha_loc / (1 + alpha_loc)
    frac = float((a > 0.5).double().mean())
    assert abs(frac - p) < 3 * np.sqrt(p * (1 - p) / n)


def test_logistic_noise_distribution(gen):
    from scipy import stats

    x = logistic_noise((100_000,), generator=gen).numpy()
    assert stats.kstest(x, "logistic").statistic < 0.01


def test_blend_cases():
    ct = torch.tensor([[1.0, 1.0, 1.0]], dtype=torch.float64)
    cs = torch.tensor([[0.0, 0.0, 0.0]], dtype=torch.float64)
    rand_t, rand_s = torch.rand(1, 3, dtype=torch.float64), torch.rand(1, 3, dtype=torch.float64)
    assert torch.equal(blend(torch.zeros(1, dtype=torch.float64), rand_t, rand_s), rand_s)
    assert torch.equal(blend(torch.ones(1, dtype=torch.float64), rand_t, rand_s), rand_t)
    np.testing.assert_array_equal(blend(torch.tensor([0.5], dtype=torch.float64), ct, cs).numpy(), [[0.5, 0.5, 0.5]])
