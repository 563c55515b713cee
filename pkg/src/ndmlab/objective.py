"""The NDM variational objective: prior, reconstruction and diffusion terms.

All term functions return per-example values of shape ``(B,)`` in nats; the
``loss_*`` functions average them over the batch into a :class:`LossBreakdown`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ContractError, SingularityError
from .forward import drift_from, marginal_sample
from .model import NDM, col
from .nets import DTYPE, as_tensor


@dataclass
class LossBreakdown:
    l_prior: torch.Tensor
    l_rec: torch.Tensor
    l_diff: torch.Tensor
    batch_size: int

    @property
    def total(self) -> torch.Tensor:
        return self.l_prior + self.l_rec + self.l_diff

    def as_floats(self) -> dict:
        return {
            "l_prior": float(self.l_prior),
            "l_rec": float(self.l_rec),
            "l_diff": float(self.l_diff),
            "total": float(self.total),
        }


def xhat(ndm: NDM, theta, z, t) -> torch.Tensor:
    """Data prediction ``(z - sigma_t eps_hat(z, t)) / alpha_t``."""
    z = as_tensor(z)
    a = ndm.schedule.alpha(t)
    if bool((a < 1e-8).any()):
        raise SingularityError("alpha_t below 1e-8; x-prediction undefined")
    return (z - col(ndm.schedule.sigma(t), z) * ndm.eps_hat(z, t, theta)) / col(a, z)


def kl_diffusion_term(ndm: NDM, theta, phi, x, z_t, s, t) -> torch.Tensor:
    """``KL(q(z_s | z_t, x) || q(z_s | z_t, xhat))`` in closed form."""
    x, z_t = as_tensor(x), as_tensor(z_t)
    sched = ndm.schedule
    var = sched.tilde_sigma2(s, t)
    if bool((var <= 0).any()):
        raise SingularityError("deterministic posterior (tilde sigma^2 = 0): KL undefined")
    xh = xhat(ndm, theta, z_t, t)
    tr = ndm.transform
    diff = (
        col(sched.alpha(s), x) * (tr.apply(x, s, phi) - tr.apply(xh, s, phi))
        + col(torch.sqrt(sched.sigma2(s) - var) / sched.sigma(t) * sched.alpha(t), x)
        * (tr.apply(xh, t, phi) - tr.apply(x, t, phi))
    )
    return (diff * diff).sum(-1) / (2.0 * var)


def prior_term(ndm: NDM, phi, x) -> torch.Tensor:
    """``KL(q(z_1 | x) || N(0, I))``."""
    x = as_tensor(x)
    d = x.shape[-1]
    s2 = ndm.schedule.sigma2(1.0)
    a2 = ndm.schedule.alpha2(1.0)
    f1 = ndm.transform.apply(x, 1.0, phi)
    return 0.5 * (d * (s2 - torch.log(s2) - 1.0) + a2 * (f1 * f1).sum(-1))


def decoder_scale(ndm: NDM) -> float:
    """Standard deviation of the Gaussian decoder ``p(x | z_0)``."""
    return max(float(ndm.schedule.sigma(ndm.schedule.t_first)), 1e-2)


def rec_term(ndm: NDM, x, z0) -> torch.Tensor:
    """``-log N(x; z_0 / alpha_0, sigma_rec^2 I)`` at the smallest latent time."""
    x, z0 = as_tensor(x), as_tensor(z0)
    d = x.shape[-1]
    a0 = ndm.schedule.alpha(ndm.schedule.t_first)
    sr = decoder_scale(ndm)
    r = x - z0 / a0
    return 0.5 * (r * r).sum(-1) / sr**2 + d * (math.log(sr) + 0.5 * math.log(2 * math.pi))


def _prior_and_rec(ndm, phi, x, eps0):
    t0 = ndm.schedule.t_first
    z0 = marginal_sample(ndm, phi, x, t0, eps0)
    return prior_term(ndm, phi, x), rec_term(ndm, x, z0)


def discrete_kl_terms(ndm: NDM, params, x, t_index, eps) -> torch.Tensor:
    """Per-example ``KL`` between steps ``t_index - 1`` and ``t_index`` for fixed noise ``eps``."""
    theta, phi = ndm.split(params)
    T = ndm.schedule.T
    t = as_tensor(t_index).to(DTYPE) / T
    s = (as_tensor(t_index).to(DTYPE) - 1.0) / T
    z_t = marginal_sample(ndm, phi, x, t, eps)
    return kl_diffusion_term(ndm, theta, phi, x, z_t, s, t)


def discrete_terms(ndm: NDM, params, x, generator: torch.Generator | None):
    """Per-example ``(L_prior, L_rec, L_diff)`` with ``L_diff = T * KL`` at one uniform step."""
    sched = ndm.schedule
    if sched.continuous or sched.T < 2:
        raise ContractError("discrete loss needs a discrete schedule with T >= 2")
    x = as_tensor(x)
    _, phi = ndm.split(params)
    t_index = torch.randint(1, sched.T + 1, (x.shape[0],), generator=generator)
    eps = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    eps0 = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    l_diff = sched.T * discrete_kl_terms(ndm, params, x, t_index, eps)
    l_prior, l_rec = _prior_and_rec(ndm, phi, x, eps0)
    return l_prior, l_rec, l_diff


def loss_discrete(ndm: NDM, params, x, generator: torch.Generator | None) -> LossBreakdown:
    """Simulation-free NELBO estimate with one uniformly drawn step per example."""
    l_prior, l_rec, l_diff = discrete_terms(ndm, params, x, generator)
    return LossBreakdown(l_prior.mean(), l_rec.mean(), l_diff.mean(), l_diff.shape[0])


def continuous_integrand(ndm: NDM, theta, phi, x, z_t, t) -> torch.Tensor:
    """Per-example integrand of the continuous diffusion term at time ``t``.

    ``||alpha_t (dF(x) - dF(xhat)) - c_t (s(x) - s(xhat))||^2 / (2 g^2)`` with
    ``c_t = (dsigma^2/dt - 2 r sigma^2 + g^2) / 2``: half the squared difference of the
    two reverse-time drifts over ``g^2``.
    """
    x, z_t = as_tensor(x), as_tensor(z_t)
    v = ndm.schedule.at(t)
    xh = xhat(ndm, theta, z_t, t)
    fx, dfx = ndm.transform.apply_jvp(x, t, phi)
    fh, dfh = ndm.transform.apply_jvp(xh, t, phi)
    diff = drift_from(ndm, fx, dfx, z_t, t) - drift_from(ndm, fh, dfh, z_t, t)
    return (diff * diff).sum(-1) / (2.0 * v.g2)


def continuous_terms(ndm: NDM, params, x, generator: torch.Generator | None):
    """Per-example ``(L_prior, L_rec, L_diff)`` with time drawn proportionally to ``1 / g^2``."""
    sched = ndm.schedule
    if not sched.continuous:
        raise ContractError("continuous loss needs a continuous schedule")
    x = as_tensor(x)
    theta, phi = ndm.split(params)
    t, w = sched.importance_sample_time(generator, x.shape[0])
    eps = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    eps0 = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    z_t = marginal_sample(ndm, phi, x, t, eps)
    l_diff = w * continuous_integrand(ndm, theta, phi, x, z_t, t)
    l_prior, l_rec = _prior_and_rec(ndm, phi, x, eps0)
    return l_prior, l_rec, l_diff


def loss_continuous(ndm: NDM, params, x, generator: torch.Generator | None) -> LossBreakdown:
    """Continuous-time NELBO estimate (importance-sampled time)."""
    l_prior, l_rec, l_diff = continuous_terms(ndm, params, x, generator)
    return LossBreakdown(l_prior.mean(), l_rec.mean(), l_diff.mean(), l_diff.shape[0])


def nelbo_terms(ndm: NDM, params, x, generator: torch.Generator | None):
    if ndm.schedule.continuous:
        return continuous_terms(ndm, params, x, generator)
    return discrete_terms(ndm, params, x, generator)


def loss_simple(ndm: NDM, params, x, generator: torch.Generator | None) -> torch.Tensor:
    """Noise-prediction MSE ``||eps_hat(z_t, t) - eps||^2`` at uniform ``t``.

    The transform still shapes ``z_t``, but nothing here rewards keeping ``F``
    informative, so a learnable ``F`` is free to shrink towards zero.
    """
    sched = ndm.schedule
    x = as_tensor(x)
    theta, phi = ndm.split(params)
    B = x.shape[0]
    if sched.continuous:
        t = sched.t_min + (1.0 - sched.t_min) * torch.rand(B, generator=generator, dtype=DTYPE)
    else:
        t = torch.randint(1, sched.T + 1, (B,), generator=generator).to(DTYPE) / sched.T
    eps = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    z_t = marginal_sample(ndm, phi, x, t, eps)
    r = ndm.eps_hat(z_t, t, theta) - eps
    return (r * r).sum(-1).mean()


def loss(ndm: NDM, params, x, generator, mode: str = "auto"):
    """Dispatch on the schedule mode; ``mode='simple'`` selects the noise-MSE loss."""
    if mode == "simple":
        return loss_simple(ndm, params, x, generator)
    if ndm.schedule.continuous:
        return loss_continuous(ndm, params, x, generator).total
    return loss_discrete(ndm, params, x, generator).total

