import math

import numpy as np
import pytest
import torch
from scipy import stats

from conftest import GaussianOptimal, ZeroEps, gen, tiny_ndm
from ndmlab.data import (
    DatasetSpec, Normalizer, checkerboard_density, energy_distance, generate, gmm_cdf, ks_test_1d, nelbo_eval,
    normalizer_for, train_test_split,
)
from ndmlab.errors import ContractError
from ndmlab.objective import nelbo_terms
from ndmlab.schedule import Schedule


def test_checkerboard_mean_and_support():
    spec = DatasetSpec(normalize=False)
    x = generate(spec, 1_000_000, seed=1).numpy()
    se = x.std(0) / 1000
    assert np.all(np.abs(x.mean(0)) < 4 * se)
    assert np.all(checkerboard_density(x[:10_000]) == 1 / 8)
    # one square from each row and column parity class is populated
    cells = np.floor(x[:10_000] + 2).astype(int)
    assert np.all((cells.sum(1) % 2) == 0) and len({tuple(c) for c in cells}) == 8


def test_gmm_samples_pass_ks_against_cdf():
    spec = DatasetSpec(kind="gaussian-mixture-1d", normalize=False)
    x = generate(spec, 20_000, seed=3)
    _, p = ks_test_1d(x, gmm_cdf)
    assert p > 1e-3


def test_seed_determinism_and_split():
    spec = DatasetSpec(kind="eight-gaussians-2d", size=1000, seed=5)
    a, b = generate(spec), generate(spec)
    assert torch.equal(a[:10], b[:10])
    tr, te = train_test_split(a, 5)
    assert tr.shape[0] == 900 and te.shape[0] == 100
    assert torch.equal(torch.sort(torch.cat([tr, te]), 0).values, torch.sort(a, 0).values)
    with pytest.raises(ContractError):
        generate(spec, 0)
    with pytest.raises(ContractError):
        DatasetSpec(kind="spiral")


@pytest.mark.parametrize("kind", ["checkerboard-2d", "gaussian-mixture-1d", "eight-gaussians-2d"])
def test_normalization_unit_scale_and_roundtrip(kind):
    spec = DatasetSpec(kind=kind, size=200_000, seed=7)
    x = generate(spec)
    assert np.allclose(x.std(0).numpy(), 1.0, atol=0.01) and np.allclose(x.mean(0).numpy(), 0.0, atol=0.01)
    norm = normalizer_for(spec)
    raw = generate(DatasetSpec(kind=kind, size=100, seed=7, normalize=False))
    torch.testing.assert_close(norm.denormalize(norm.normalize(raw)), raw, rtol=0, atol=1e-12)
    assert norm.log_abs_det == pytest.approx(-sum(math.log(s) for s in norm.scale))
    assert Normalizer.identity(2).normalize(raw[:, :1].repeat(1, 2)).shape == (100, 2)


def test_energy_distance_basics():
    a = torch.randn(300, 2, generator=gen(0))
    assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)
    delta = 1.7
    p, q = torch.zeros(5, 2), torch.full((5, 2), 0.0)
    q[:, 0] = delta
    assert energy_distance(p, q) == pytest.approx(2 * delta)
    perm = a[torch.randperm(300, generator=gen(1))]
    b = torch.randn(200, 2, generator=gen(2))
    assert energy_distance(perm, b) == pytest.approx(energy_distance(a, b), rel=1e-12)
    with pytest.raises(ContractError):
        energy_distance(torch.zeros(0, 2), a)
    with pytest.raises(ContractError):
        energy_distance(torch.zeros(3, 1), a)


def test_energy_distance_null_permutation():
    n = 2000
    a = torch.randn(n, 1, generator=gen(3))
    b = torch.randn(n, 1, generator=gen(4))
    obs = energy_distance(a, b)
    pooled = torch.cat([a, b])
    null = []
    for k in range(200):
        perm = torch.randperm(2 * n, generator=gen(100 + k))
        null.append(energy_distance(pooled[perm[:n]], pooled[perm[n:]]))
    assert obs <= np.quantile(null, 0.999)


def test_ks_calibration_and_power():
    rng = np.random.default_rng(0)
    ps = [ks_test_1d(torch.as_tensor(rng.standard_normal(500)), stats.norm.cdf)[1] for _ in range(100)]
    assert sum(p < 0.01 for p in ps) <= 5
    stat, p = ks_test_1d(torch.zeros(100), stats.norm.cdf)
    assert p < 1e-10 and stat == pytest.approx(0.5)
    spec = DatasetSpec(kind="gaussian-mixture-1d", normalize=False)
    x = generate(spec, 10_000, seed=9)
    _, p = ks_test_1d(x, lambda v: stats.norm.cdf(v, 0, x.std().item()))
    assert p < 1e-6


def test_nelbo_eval_perfect_predictor_is_prior_plus_rec():
    class Exact(ZeroEps):
        def eps_hat(self, z, t, theta):
            return z / self.schedule.sigma(t).reshape(-1, 1)

    from ndmlab.transform import IdentityTransform

    ndm = Exact(Schedule(), IdentityTransform(2))
    x = torch.zeros(50, 2)
    est = nelbo_eval(x, ndm, torch.zeros(0), mc_samples=2, generator=gen(0))
    g = gen(0)
    parts = [nelbo_terms(ndm, torch.zeros(0), x, g) for _ in range(2)]
    assert all(float(d.abs().max()) == 0.0 for _, _, d in parts)
    assert est.n == 100
    assert est.mean == pytest.approx(float(torch.cat([p + r for p, r, _ in parts]).mean()), rel=1e-12)


def test_nelbo_stderr_shrinks_with_more_draws():
    ndm = GaussianOptimal(Schedule(), v=1.0)
    x = torch.randn(500, 2, generator=gen(1))
    e1 = nelbo_eval(x, ndm, torch.zeros(0), mc_samples=4, generator=gen(2))
    e2 = nelbo_eval(x, ndm, torch.zeros(0), mc_samples=8, generator=gen(3))
    assert e2.stderr / e1.stderr == pytest.approx(1 / math.sqrt(2), rel=0.2)
    b = e1.bpd(2)
    assert b.mean == pytest.approx(e1.mean / (2 * math.log(2)))
