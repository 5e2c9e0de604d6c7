import math

import numpy as np
import pytest
import torch

from sfnerf.exceptions import NumericError
from sfnerf.geometry import FrustumSamples, Rays, stratified_sample
from sfnerf.static_field import StaticField, init_linear_, render_ray


def _rays(n, near=0.0, far=1.0):
    return Rays(
        origins=torch.zeros(n, 3, dtype=torch.float64),
        directions=torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64).expand(n, 3).clone(),
        pixels=torch.zeros(n, 2, dtype=torch.float64),
        image_ids=torch.zeros(n, dtype=torch.int64),
        radii=torch.full((n,), 0.01, dtype=torch.float64),
        near=torch.full((n,), near, dtype=torch.float64),
        far=torch.full((n,), far, dtype=torch.float64),
    )


def _field(gen, **kw):
    f = StaticField(L_x=4, L_d=2, appearance_dim=6, depth=3, width=16, color_width=8, skip=2, **kw).double()
    init_linear_(f, gen)
    return f


def test_density_ignores_direction(gen):
    field = _field(gen)
    samples = stratified_sample(_rays(5), 7)
    app = torch.randn(5, 6, dtype=torch.float64, generator=gen)
    d1 = torch.nn.functional.normalize(torch.randn(5, 3, dtype=torch.float64, generator=gen), dim=-1)
    d2 = torch.nn.functional.normalize(torch.randn(5, 3, dtype=torch.float64, generator=gen), dim=-1)
    a, b = field(samples, d1, app), field(samples, d2, app)
    assert torch.equal(a.density, b.density)
    assert not torch.allclose(a.color, b.color)


def test_color_depends_on_appearance(gen):
    field = _field(gen)
    samples = stratified_sample(_rays(3), 4)
    d = _rays(3).directions
    a = field(samples, d, torch.zeros(3, 6, dtype=torch.float64))
    b = field(samples, d, torch.ones(3, 6, dtype=torch.float64))
    assert torch.equal(a.density, b.density)
    assert not torch.allclose(a.color, b.color)


def test_zero_parameters_give_activation_constants():
    field = StaticField(L_x=3, L_d=2, appearance_dim=4, depth=2, width=8, color_width=4, skip=1).double()
    for p in field.parameters():
        torch.nn.init.zeros_(p)
    samples = stratified_sample(_rays(2), 3)
    out = field(samples, _rays(2).directions, torch.zeros(2, 4, dtype=torch.float64))
    # softplus(0 - 1) = log(1 + e^-1); sigmoid(0) = 0.5
    np.testing.assert_allclose(out.density.detach().numpy(), math.log1p(math.exp(-1.0)), rtol=1e-15)
    np.testing.assert_array_equal(out.color.detach().numpy(), 0.5)
    assert abs(math.log1p(math.exp(-1.0)) - 0.31326168751822286) < 1e-15


def test_appearance_dim_checked(gen):
    field = _field(gen)
    with pytest.raises(ValueError):
        field(stratified_sample(_rays(2), 3), _rays(2).directions, torch.zeros(2, 5, dtype=torch.float64))


def _manual_samples(t):
    t = torch.as_tensor(t, dtype=torch.float64)
    z = torch.zeros(*t.shape[:-1], t.shape[-1] - 1, 3, dtype=torch.float64)
    return FrustumSamples(t=t, means=z, covs=z)


def test_empty_space():
    s = _manual_samples([[0.0, 0.3, 0.5, 1.0]])
    res = render_ray(s, torch.zeros(1, 3, dtype=torch.float64), torch.rand(1, 3, 3, dtype=torch.float64))
    assert torch.equal(res.color, torch.zeros(1, 3, dtype=torch.float64))
    assert torch.equal(res.weights, torch.zeros(1, 3, dtype=torch.float64))
    assert torch.equal(res.transmittance, torch.ones(1, 4, dtype=torch.float64))


def test_opaque_interval():
    s = _manual_samples([[0.0, 1.0]])
    c = torch.tensor([[[0.2, 0.7, 0.4]]], dtype=torch.float64)
    res = render_ray(s, torch.tensor([[50.0]], dtype=torch.float64), c)
    assert torch.all((res.color - c[:, 0]).abs() <= 1e-20 + math.exp(-50))
    np.testing.assert_allclose(res.color.numpy(), c[:, 0].numpy(), rtol=0, atol=1e-20)


def _linear_field_render(k):
    t = torch.linspace(0, 1, k + 1, dtype=torch.float64)[None]
    mid = (t[:, 1:] + t[:, :-1]) / 2
    color = torch.stack([mid, torch.zeros_like(mid), 1 - mid], -1)
    return render_ray(_manual_samples(t), torch.full_like(mid, 2.0), color)


def test_quadrature_converges_to_dense_reference():
    coarse, dense = _linear_field_render(64), _linear_field_render(65536)
    assert (coarse.color - dense.color).abs().max() < 1e-3
    # closed form of the continuous integral: int_0^1 2 e^{-2t} c(t) dt
    r = (1 - 3 * math.exp(-2)) / 2
    b = 1 - math.exp(-2) - r
    np.testing.assert_allclose(dense.color[0].numpy(), [r, 0, b], atol=1e-8)


def test_weights_telescope(gen):
    t = torch.sort(torch.rand(10_000, 33, dtype=torch.float64, generator=gen) * 4, -1).values
    density = torch.rand(10_000, 32, dtype=torch.float64, generator=gen) * 5
    res = render_ray(_manual_samples(t), density, torch.rand(10_000, 32, 3, dtype=torch.float64, generator=gen))
    np.testing.assert_allclose(res.weights.sum(-1).numpy(), 1 - res.transmittance[:, -1].numpy(), atol=1e-6)


def test_nonfinite_density_reports_rays():
    s = _manual_samples([[0.0, 0.5, 1.0]] * 3)
    density = torch.ones(3, 2, dtype=torch.float64)
    density[1, 0] = float("nan")
    with pytest.raises(NumericError) as err:
        render_ray(s, density, torch.zeros(3, 2, 3, dtype=torch.float64))
    assert err.value.context["rays"] == [1]
