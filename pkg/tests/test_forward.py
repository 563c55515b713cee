import math

import pytest
import torch

from conftest import gen, tiny_ndm
from ndmlab.errors import ContractError
from ndmlab.forward import forward_sde_drift, marginal_sample, posterior_params, score
from ndmlab.model import NDM
from ndmlab.schedule import Schedule
from ndmlab.transform import DiagonalTransform, IdentityTransform


def test_marginal_sample_formula():
    ndm = NDM(Schedule(), DiagonalTransform([2.0, 0.5]))
    x = torch.randn(4, 2, generator=gen(0))
    eps = torch.randn(4, 2, generator=gen(1))
    t = 0.3
    z = marginal_sample(ndm, None, x, t, eps)
    f = torch.tensor([2.0, 0.5]) ** t * x
    torch.testing.assert_close(z, ndm.schedule.alpha(t) * f + ndm.schedule.sigma(t) * eps)


def test_marginal_moments_monte_carlo():
    ndm, params = tiny_ndm()
    _, phi = ndm.split(params)
    x = torch.tensor([[0.7, -1.2]])
    t = 0.4
    eps = torch.randn(200_000, 2, generator=gen(2))
    z = marginal_sample(ndm, phi, x.expand(200_000, 2), t, eps)
    mean = ndm.schedule.alpha(t) * ndm.transform.apply(x, t, phi)[0]
    se = ndm.schedule.sigma(t) / math.sqrt(200_000)
    assert bool(((z.mean(0) - mean).abs() < 4 * se).all())


def test_posterior_at_s_equals_t_is_point_mass():
    ndm, params = tiny_ndm()
    _, phi = ndm.split(params)
    x = torch.randn(3, 2, generator=gen(3))
    z = torch.randn(3, 2, generator=gen(4))
    pp = posterior_params(ndm, phi, x, z, 0.5, 0.5)
    assert float(pp.variance) == 0.0
    torch.testing.assert_close(pp.mean, z, rtol=1e-12, atol=1e-12)


def test_posterior_rejects_excess_variance():
    ndm, params = tiny_ndm()
    _, phi = ndm.split(params)
    x = torch.zeros(1, 2)
    with pytest.raises(ContractError):
        posterior_params(ndm, phi, x, x, 0.2, 0.5, variance=ndm.schedule.sigma2(0.2) * 1.01)


def test_posterior_identity_matches_ddpm():
    d = Schedule(mode="discrete", T=1000)
    ndm = NDM(d, IdentityTransform(2))
    x = torch.randn(5, 2, generator=gen(5))
    z = torch.randn(5, 2, generator=gen(6))
    for i in (1, 37, 999):
        ab, abp, b = d.alpha2_table[i], d.alpha2_table[i - 1], d.beta_table[i]
        mean = torch.sqrt(abp) * b / (1 - ab) * x + torch.sqrt(1 - b) * (1 - abp) / (1 - ab) * z
        pp = posterior_params(ndm, None, x, z, (i - 1) / 1000, i / 1000)
        torch.testing.assert_close(pp.mean, mean, rtol=1e-12, atol=1e-12)


def test_score_is_gradient_of_log_marginal():
    ndm, params = tiny_ndm()
    _, phi = ndm.split(params)
    x = torch.randn(4, 2, generator=gen(7))
    z = torch.randn(4, 2, generator=gen(8)).requires_grad_(True)
    t = 0.25
    m = ndm.schedule.alpha(t) * ndm.transform.apply(x, t, phi)
    logp = (-0.5 * (z - m) ** 2 / ndm.schedule.sigma2(t)).sum()
    (g,) = torch.autograd.grad(logp, z)
    torch.testing.assert_close(score(ndm, phi, x, z.detach(), t), g, rtol=1e-12, atol=1e-12)


def test_forward_drift_requires_continuous():
    ndm = NDM(Schedule(mode="discrete", T=100), IdentityTransform(1))
    with pytest.raises(ContractError):
        forward_sde_drift(ndm, None, torch.zeros(1, 1), torch.zeros(1, 1), 0.5)


def test_forward_drift_identity_is_reverse_vp_sde():
    ndm = NDM(Schedule(), IdentityTransform(2))
    x = torch.randn(3, 2, generator=gen(9))
    z = torch.randn(3, 2, generator=gen(10))
    t = 0.6
    b = ndm.schedule.beta(t)
    s = score(ndm, None, x, z, t)
    expected = -0.5 * b * z - b * s  # f(z) - g^2 * score with f = -beta z / 2
    torch.testing.assert_close(forward_sde_drift(ndm, None, x, z, t), expected, rtol=1e-12, atol=1e-12)
