"""Forward (noising) machinery of an NDM: marginals, posteriors, scores and the
data-conditional reverse-time SDE.

Shapes: ``x`` and ``z`` are ``(B, d)``; times are scalars or ``(B,)``.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import ContractError, SingularityError
from .model import NDM, col
from .nets import as_tensor


class PosteriorParams(NamedTuple):
    mean: torch.Tensor
    variance: torch.Tensor


def marginal_sample(ndm: NDM, phi, x, t, eps) -> torch.Tensor:
    """``z_t = alpha_t F(x, t) + sigma_t eps`` with caller-supplied noise."""
    x = as_tensor(x)
    sched = ndm.schedule
    fx = ndm.transform.apply(x, t, phi)
    return col(sched.alpha(t), x) * fx + col(sched.sigma(t), x) * as_tensor(eps)


def posterior_mean_from(ndm: NDM, fs, ft, z_t, s, t, variance) -> torch.Tensor:
    """Posterior mean given precomputed ``F(x, s)`` and ``F(x, t)``."""
    sched = ndm.schedule
    a_s, a_t = col(sched.alpha(s), z_t), col(sched.alpha(t), z_t)
    s2s, sig_t = col(sched.sigma2(s), z_t), col(sched.sigma(t), z_t)
    var = col(as_tensor(variance), z_t)
    if bool((var > s2s * (1.0 + 1e-12) + 1e-300).any()):
        raise ContractError("posterior variance exceeds sigma_s^2")
    coef = torch.sqrt(torch.clamp(s2s - var, min=0.0)) / sig_t
    return a_s * fs + coef * (z_t - a_t * ft)


def posterior_params(ndm: NDM, phi, x, z_t, s, t, variance=None) -> PosteriorParams:
    """Mean and variance of ``q(z_s | z_t, x)``; ``variance`` defaults to the DDPM-consistent choice."""
    x, z_t = as_tensor(x), as_tensor(z_t)
    if variance is None:
        variance = ndm.schedule.tilde_sigma2(s, t)
    fs = ndm.transform.apply(x, s, phi)
    ft = ndm.transform.apply(x, t, phi)
    return PosteriorParams(posterior_mean_from(ndm, fs, ft, z_t, s, t, variance), as_tensor(variance))


def score_from(ndm: NDM, ft, z, t) -> torch.Tensor:
    sched = ndm.schedule
    s2 = col(sched.sigma2(t), z)
    if bool((s2 <= 0).any()):
        raise SingularityError("score undefined at sigma_t = 0")
    return (col(sched.alpha(t), z) * ft - z) / s2


def score(ndm: NDM, phi, x, z, t) -> torch.Tensor:
    """Conditional score ``(alpha_t F(x, t) - z) / sigma_t^2`` of the Gaussian marginal."""
    z = as_tensor(z)
    return score_from(ndm, ndm.transform.apply(x, t, phi), z, t)


def score_coefficient(ndm: NDM, t, nu_dot_sigma2=None) -> torch.Tensor:
    """``(dsigma^2/dt - 2 r sigma^2 + nu_dot sigma^2) / 2``; ``nu_dot sigma^2`` defaults to ``g^2``."""
    v = ndm.schedule.at(t)
    extra = v.g2 if nu_dot_sigma2 is None else as_tensor(nu_dot_sigma2)
    return 0.5 * (v.dsigma2_dt - 2.0 * v.r * v.sigma2 + extra)


def drift_from(ndm: NDM, ft, dft, z, t, nu_dot_sigma2=None) -> torch.Tensor:
    """``alpha_t dF + r z - coef * score`` given ``F`` and ``dF/dt`` at the conditioning point."""
    v = ndm.schedule.at(t)
    c = score_coefficient(ndm, t, nu_dot_sigma2)
    return col(v.alpha, z) * dft + col(v.r, z) * z - col(c, z) * score_from(ndm, ft, z, t)


def forward_sde_drift(ndm: NDM, phi, x, z, t, nu_dot_sigma2=None) -> torch.Tensor:
    """Drift of the reverse-time SDE whose transitions are the posteriors ``q(z_s | z_t, x)``.

    Time runs backwards: a step from ``t`` to ``t - h`` is
    ``z - h * drift + sqrt(h * nu_dot sigma^2) * xi``.
    """
    if not ndm.schedule.continuous:
        raise ContractError("SDE drift needs a continuous schedule")
    z = as_tensor(z)
    ft, dft = ndm.transform.apply_jvp(x, t, phi)
    return drift_from(ndm, ft, dft, z, t, nu_dot_sigma2)
