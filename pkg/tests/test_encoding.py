import numpy as np
import pytest
import torch
from scipy import stats
from hypothesis import given, settings
from hypothesis import strategies as st

from sfnerf.encoding import EncodingConfig, band_slice, integrated_positional_encode, positional_encode


def test_zero_input_band_ordering():
    out = positional_encode(torch.zeros(2, dtype=torch.float64), 2)
    np.testing.assert_array_equal(out.numpy(), [1, 1, 0, 0, 1, 1, 0, 0])


def test_quarter_period():
    out = positional_encode(torch.tensor([0.5], dtype=torch.float64), 1)
    np.testing.assert_allclose(out.numpy(), [0, 1], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 5), L=st.integers(1, 8), batch=st.integers(1, 4))
def test_output_length(n, L, batch):
    v = torch.randn(batch, n, dtype=torch.float64)
    assert positional_encode(v, L).shape == (batch, 2 * n * L)


def test_band_slice_layout():
    v = torch.tensor([0.1, -0.3, 0.7], dtype=torch.float64)
    out = positional_encode(v, 4)
    for k in range(4):
        band = out[band_slice(k, 3)]
        np.testing.assert_allclose(band[:3].numpy(), np.cos(2**k * np.pi * v.numpy()), atol=1e-14)
        np.testing.assert_allclose(band[3:].numpy(), np.sin(2**k * np.pi * v.numpy()), atol=1e-14)


def test_zero_covariance_is_point_encoding():
    mean = torch.randn(5, 3, dtype=torch.float64)
    a = integrated_positional_encode(mean, torch.zeros_like(mean), 6)
    assert torch.equal(a, positional_encode(mean, 6))


def test_large_covariance_attenuates():
    mean = torch.randn(4, 3, dtype=torch.float64)
    # 4^k pi^2 var > 60 already at k = 0
    var = torch.full_like(mean, 61 / np.pi**2)
    assert integrated_positional_encode(mean, var, 5).abs().max() < 1e-6


def test_matches_monte_carlo(rng):
    mean = np.array([0.2, -0.35, 0.6])
    var = np.array([0.01, 0.003, 0.02])
    n = 1_000_000
    # Stratified normal draws (one uniform per equal-probability stratum, per axis) keep
    # the Monte Carlo noise well below the 1e-3 tolerance at this sample size.
    u = (np.arange(n)[:, None] + rng.uniform(size=(n, 3))) / n
    x = mean + np.sqrt(var) * stats.norm.ppf(u)
    L = 3
    expected = []
    for k in range(L):
        s = 2**k * np.pi
        expected += list(np.cos(s * x).mean(0)) + list(np.sin(s * x).mean(0))
    out = integrated_positional_encode(torch.tensor(mean), torch.tensor(var), L).numpy()
    np.testing.assert_allclose(out, expected, atol=1e-3)


def test_negative_variance_rejected():
    with pytest.raises(ValueError):
        integrated_positional_encode(torch.zeros(3), torch.tensor([0.0, -1.0, 0.0]), 2)


def test_config_rejects_zero_bands():
    with pytest.raises(ValueError):
        EncodingConfig(L_p=0)
