"""Generation and likelihood for trained NDMs.

Four samplers share the reverse process ``p(z_s | z_t) = q(z_s | z_t, xhat(z_t, t))``:

* ``ancestral_sample`` -- the posterior chain with the DDPM-consistent variance
  (``eta`` scales it),
* ``ddim_sample`` -- the same chain with zero posterior variance,
* ``em_sample`` -- Euler-Maruyama on the reverse SDE,
* ``ode_sample`` -- adaptive RK45 on the probability-flow ODE.

``nll_ode`` integrates that ODE as a continuous normalizing flow.  The returned
sample is always the decoder mean ``z_first / alpha_first``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ContractError
from .forward import drift_from, posterior_mean_from
from .model import NDM, col
from .nets import DTYPE, as_tensor
from .objective import xhat
from .solvers import rk45


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    logdet: torch.Tensor | None = None

    def append(self, t, z):
        self.times.append(float(t))
        self.states.append(z.detach().clone())

    def stacked(self) -> torch.Tensor:
        """States as a ``(K, B, d)`` tensor."""
        return torch.stack(self.states)


@dataclass(frozen=True)
class SolverConfig:
    method: str = "ancestral"
    steps: int | None = None
    atol: float = 1e-5
    rtol: float = 1e-5
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.method not in ("ancestral", "ddim", "em-sde", "rk45-ode"):
            raise ContractError(f"unknown sampler {self.method!r}")
        if self.steps is not None and self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.atol <= 0 or self.rtol <= 0:
            raise ContractError("tolerances must be positive")


def _decode(ndm: NDM, z):
    return z / ndm.schedule.alpha(ndm.schedule.t_first)


def _prior_draw(ndm, n, generator):
    return torch.randn(n, ndm.data_dim, generator=generator, dtype=DTYPE)


def posterior_step(ndm: NDM, theta, phi, z_t, s, t, variance, noise=None) -> torch.Tensor:
    """One reverse transition ``z_t -> z_s`` with ``xhat`` substituted for ``x``."""
    xh = xhat(ndm, theta, z_t, t)
    tr = ndm.transform
    mean = posterior_mean_from(ndm, tr.apply(xh, s, phi), tr.apply(xh, t, phi), z_t, s, t, variance)
    if noise is None:
        return mean
    return mean + torch.sqrt(as_tensor(variance)) * noise


@torch.no_grad()
def ancestral_sample(ndm: NDM, params, n: int, generator: torch.Generator | None = None,
                     steps: int | None = None, eta: float = 1.0, z_T=None):
    """Run the posterior chain from ``z_1 ~ N(0, I)`` down the (possibly strided) time grid."""
    theta, phi = ndm.split(params)
    sched = ndm.schedule
    grid = sched.grid(steps)
    z = _prior_draw(ndm, n, generator) if z_T is None else as_tensor(z_T).clone()
    traj = Trajectory()
    traj.append(grid[-1], z)
    for j in range(len(grid) - 1, 0, -1):
        t, s = grid[j], grid[j - 1]
        var = eta * eta * sched.tilde_sigma2(s, t)
        noise = None
        if float(var) > 0:
            noise = torch.randn(z.shape, generator=generator, dtype=DTYPE)
        z = posterior_step(ndm, theta, phi, z, s, t, var, noise)
        traj.append(s, z)
    return _decode(ndm, z), traj


def ddim_sample(ndm: NDM, params, n: int, generator: torch.Generator | None = None,
                steps: int | None = None, z_T=None):
    """Deterministic chain (zero posterior variance); randomness only through ``z_T``."""
    return ancestral_sample(ndm, params, n, generator, steps=steps, eta=0.0, z_T=z_T)


def reverse_drift(ndm: NDM, theta, phi, z, t, nu_dot_sigma2=None) -> torch.Tensor:
    """Model drift ``alpha dF(xhat) + r z - c_t s_theta`` of the reverse-time SDE.

    ``nu_dot_sigma2`` defaults to ``g^2`` (the SDE); pass 0 for the probability-flow ODE.
    """
    xh = xhat(ndm, theta, z, t)
    fh, dfh = ndm.transform.apply_jvp(xh, t, phi)
    return drift_from(ndm, fh, dfh, z, t, nu_dot_sigma2)


def ode_drift(ndm: NDM, theta, phi, z, t) -> torch.Tensor:
    return reverse_drift(ndm, theta, phi, z, t, nu_dot_sigma2=0.0)


def _require_continuous(ndm):
    if not ndm.schedule.continuous:
        raise ContractError("this sampler needs a continuous-time model")


@torch.no_grad()
def em_sample(ndm: NDM, params, n: int, generator: torch.Generator | None = None,
              steps: int = 1000, noise_scale: float = 1.0, z_T=None):
    """Euler-Maruyama from ``t = 1`` down to ``t_min`` on a uniform grid.

    ``noise_scale`` multiplies the diffusion coefficient (``nu_dot sigma^2 = noise_scale^2 g^2``)
    in both drift and noise; 0 gives an Euler scheme for the probability-flow ODE.
    """
    _require_continuous(ndm)
    if steps < 8:
        raise ContractError("Euler-Maruyama needs at least 8 steps")
    theta, phi = ndm.split(params)
    sched = ndm.schedule
    grid = sched.grid(steps)
    z = _prior_draw(ndm, n, generator) if z_T is None else as_tensor(z_T).clone()
    traj = Trajectory()
    traj.append(grid[-1], z)
    for j in range(steps, 0, -1):
        t, s = grid[j], grid[j - 1]
        h = float(t - s)
        nds = noise_scale**2 * sched.beta(t)
        z = z - h * reverse_drift(ndm, theta, phi, z, t, nds)
        if noise_scale != 0.0:
            z = z + math.sqrt(h * float(nds)) * torch.randn(z.shape, generator=generator, dtype=DTYPE)
        traj.append(s, z)
    return _decode(ndm, z), traj


@torch.no_grad()
def ode_sample(ndm: NDM, params, z_T, atol: float = 1e-5, rtol: float = 1e-5, record: bool = False):
    """Integrate the probability-flow ODE from ``t = 1`` to ``t_min`` with RK45."""
    _require_continuous(ndm)
    theta, phi = ndm.split(params)
    res = rk45(lambda t, z: ode_drift(ndm, theta, phi, z, t), 1.0, ndm.schedule.t_min,
               as_tensor(z_T), atol=atol, rtol=rtol, record=record)
    traj = Trajectory(times=list(res.ts), states=list(res.ys))
    return _decode(ndm, res.y), traj


def _drift_and_trace(ndm, theta, phi, z, t, trace, probes):
    with torch.enable_grad():
        z = z.detach().requires_grad_(True)
        v = ode_drift(ndm, theta, phi, z, t)
        d = z.shape[1]
        if trace == "exact":
            tr = torch.zeros(z.shape[0], dtype=DTYPE)
            for k in range(d):
                (g,) = torch.autograd.grad(v[:, k].sum(), z, retain_graph=k < d - 1)
                tr = tr + g[:, k]
        else:
            tr = torch.zeros(z.shape[0], dtype=DTYPE)
            for j in range(probes.shape[0]):
                (g,) = torch.autograd.grad((v * probes[j]).sum(), z, retain_graph=j < probes.shape[0] - 1)
                tr = tr + (g * probes[j]).sum(1)
            tr = tr / probes.shape[0]
    return v.detach(), tr.detach()


def nll_ode(ndm: NDM, params, x, atol: float = 1e-5, rtol: float = 1e-5,
            trace: str | None = None, n_probes: int = 16, generator: torch.Generator | None = None):
    """Per-example ``-log p(x)`` in nats and bits/dim via the probability-flow ODE.

    The decoder is taken as the deterministic map ``x = z / alpha_{t_min}``, so
    ``log p(x) = log p_{t_min}(alpha x) + d log alpha_{t_min}``, and
    ``log p_{t_min}(z) = log N(z_1; 0, I) + int_{t_min}^1 tr(d drift / dz) dt``.
    Exact traces for ``d <= 3``; Rademacher (Hutchinson) estimates above.
    """
    _require_continuous(ndm)
    theta, phi = ndm.split(params)
    x = as_tensor(x)
    B, d = x.shape
    if trace is None:
        trace = "exact" if d <= 3 else "hutchinson"
    probes = None
    if trace == "hutchinson":
        probes = torch.randint(0, 2, (n_probes, B, d), generator=generator).to(DTYPE) * 2 - 1
    t0 = ndm.schedule.t_min
    a0 = ndm.schedule.alpha(t0)

    def f(t, y):
        v, tr = _drift_and_trace(ndm, theta, phi, y[:, :d], t, trace, probes)
        return torch.cat([v, tr[:, None]], dim=1)

    y0 = torch.cat([a0 * x, torch.zeros(B, 1, dtype=DTYPE)], dim=1)
    res = rk45(f, t0, 1.0, y0, atol=atol, rtol=rtol)
    z1, acc = res.y[:, :d], res.y[:, d]
    log_prior = -0.5 * (z1 * z1).sum(1) - 0.5 * d * math.log(2 * math.pi)
    logp = log_prior + acc + d * torch.log(a0)
    nats = -logp
    return nats, nats / (d * math.log(2.0))
