import pytest
import torch

from conftest import gen, perturb
from ndmlab.errors import ContractError
from ndmlab.nets import NetSpec
from ndmlab.transform import DiagonalTransform, IdentityTransform, LearnableTransform, transform_from_dict


def learnable(d=2, seed=0, scale=0.5):
    tr = LearnableTransform(NetSpec.for_data(d, (6, 5), activation="tanh"))
    return tr, perturb(tr.init_params(gen(seed)), scale, seed + 1)


def test_identity():
    tr = IdentityTransform(2)
    x = torch.randn(5, 2, generator=gen(0))
    f, df = tr.apply_jvp(x, 0.3)
    assert torch.equal(f, x) and torch.equal(df, torch.zeros_like(x))
    with pytest.raises(ContractError):
        tr.apply(torch.zeros(3, 3), 0.1)


def test_diagonal_example_and_derivative():
    tr = DiagonalTransform([4.0, 4.0])
    f = tr.apply(torch.tensor([[1.0, -1.0]]), 0.5)
    torch.testing.assert_close(f, torch.tensor([[2.0, -2.0]]))
    x = torch.randn(4, 2, generator=gen(1))
    assert torch.equal(tr.apply(x, 0.0), x)
    h = 1e-5
    fd = (tr.apply(x, 0.6 + h) - tr.apply(x, 0.6 - h)) / (2 * h)
    torch.testing.assert_close(tr.time_derivative(x, 0.6), fd, rtol=1e-8, atol=1e-10)
    with pytest.raises(ContractError):
        DiagonalTransform([1.0, -2.0])


def test_learnable_identity_at_zero_and_at_init():
    tr, phi = learnable()
    x = torch.randn(7, 2, generator=gen(2))
    assert torch.equal(tr.apply(x, 0.0, phi), x)
    phi0 = tr.init_params(gen(0))
    t = torch.rand(7, generator=gen(3))
    torch.testing.assert_close(tr.apply(x, t, phi0), x, rtol=0, atol=1e-15)


@pytest.mark.parametrize("t", [0.0, 0.2, 0.55, 1.0])
def test_learnable_time_derivative_vs_finite_differences(t):
    tr, phi = learnable(seed=4)
    x = torch.randn(6, 2, generator=gen(5))
    h = 1e-5
    tt = torch.full((6,), t)
    if t == 0.0:
        fd = (tr.apply(x, tt + h, phi) - tr.apply(x, tt, phi)) / h
        tol = 1e-3
    elif t == 1.0:
        fd = (tr.apply(x, tt, phi) - tr.apply(x, tt - h, phi)) / h
        tol = 1e-3
    else:
        fd = (tr.apply(x, tt + h, phi) - tr.apply(x, tt - h, phi)) / (2 * h)
        tol = 1e-4
    df = tr.time_derivative(x, tt, phi)
    assert float(((df - fd).abs() / torch.clamp(fd.abs(), min=1e-3)).max()) < tol


def test_transform_serialization_roundtrip():
    tr, phi = learnable()
    tr2 = transform_from_dict(tr.to_dict())
    x = torch.randn(3, 2, generator=gen(0))
    assert torch.equal(tr.apply(x, 0.4, phi), tr2.apply(x, 0.4, phi))
    for t in (IdentityTransform(3), DiagonalTransform([2.0, 0.5])):
        assert transform_from_dict(t.to_dict()).to_dict() == t.to_dict()
    with pytest.raises(ContractError):
        transform_from_dict({"kind": "nope"})
