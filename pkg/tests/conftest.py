import numpy as np
import pytest
import torch

from ndmlab.model import NDM
from ndmlab.nets import DTYPE, NetSpec
from ndmlab.schedule import Schedule
from ndmlab.transform import IdentityTransform, LearnableTransform

torch.set_default_dtype(torch.float64)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def perturb(params, scale=0.3, seed=1):
    """Random non-trivial parameters (zero-initialised layers would hide bugs)."""
    return params + scale * torch.randn(params.shape, generator=gen(seed), dtype=DTYPE)


def tiny_ndm(schedule=None, learnable=True, d=2, seed=0, width=8):
    schedule = schedule or Schedule()
    eps = NetSpec.for_data(d, (width, width), time_embedding="sinusoidal", n_frequencies=3)
    tr = LearnableTransform(NetSpec.for_data(d, (width,), activation="tanh")) if learnable else IdentityTransform(d)
    ndm = NDM(schedule, tr, eps)
    return ndm, perturb(ndm.init_params(gen(seed)), seed=seed + 100)


class ZeroEps(NDM):
    """NDM whose noise predictor is identically zero."""

    def __init__(self, schedule, transform):
        super().__init__(schedule, transform, None)

    def eps_hat(self, z, t, theta):
        return torch.zeros_like(torch.as_tensor(z, dtype=DTYPE))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class GaussianOptimal(NDM):
    """Exact noise predictor for data ~ N(0, v I) under the identity transform."""

    def __init__(self, schedule, d=2, v=0.5):
        from ndmlab.transform import IdentityTransform

        super().__init__(schedule, IdentityTransform(d), None)
        self.v = v

    def eps_hat(self, z, t, theta):
        z = torch.as_tensor(z, dtype=DTYPE)
        a2 = self.schedule.alpha2(t).reshape(-1, 1)
        s = self.schedule.sigma(t).reshape(-1, 1)
        return s * z / (a2 * self.v + s * s)


# one verdict line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
