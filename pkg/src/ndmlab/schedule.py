"""Variance-preserving noise schedules in discrete and continuous time.

Continuous mode uses the linear-beta VP-SDE: ``beta(t) = beta_min + t (beta_max - beta_min)``,
``alpha_t^2 = exp(-B(t))`` with ``B(t) = int_0^t beta``, ``sigma_t^2 = 1 - alpha_t^2``.

Discrete mode holds ``T + 1`` noise levels for the latents ``z_0 .. z_T``; latent ``i``
sits at time ``i / T``.  Two tables are available:

* ``"linear"`` -- the DDPM linear-beta table, ``T + 1`` betas from ``1e-4`` to ``0.02``
  rescaled by ``1000 / T``; only valid while every beta stays below 1 (T >= 21).
* ``"vp"`` -- the continuous schedule sampled at ``max(i / T, t_min)``, usable for any T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import torch

from .errors import ContractError, DomainError
from .nets import DTYPE, as_tensor

_TIME_SLACK = 1e-12


class ScheduleValues(NamedTuple):
    alpha: torch.Tensor
    sigma: torch.Tensor
    sigma2: torch.Tensor
    dalpha_dt: torch.Tensor
    dsigma2_dt: torch.Tensor
    r: torch.Tensor
    g2: torch.Tensor
    nu: torch.Tensor


@dataclass(frozen=True)
class Schedule:
    mode: str = "continuous"
    T: int = 1000
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-3
    discretization: str = "linear"

    def __post_init__(self):
        if self.mode not in ("continuous", "discrete"):
            raise ContractError(f"unknown schedule mode {self.mode!r}")
        if self.beta_min <= 0 or self.beta_max < self.beta_min:
            raise ContractError("need 0 < beta_min <= beta_max")
        if not 0.0 < self.t_min < 1.0:
            raise ContractError("t_min must lie in (0, 1)")
        if self.mode == "discrete":
            if self.T < 1:
                raise ContractError("discrete schedule needs T >= 1")
            if self.discretization not in ("linear", "vp"):
                raise ContractError(f"unknown discretization {self.discretization!r}")
            if self.discretization == "linear" and 0.02 * 1000.0 / self.T >= 1.0:
                raise ContractError(
                    f"linear DDPM betas exceed 1 for T={self.T}; use discretization='vp'"
                )

    @property
    def continuous(self) -> bool:
        return self.mode == "continuous"

    def to_dict(self) -> dict:
        return dict(mode=self.mode, T=self.T, beta_min=self.beta_min, beta_max=self.beta_max,
                    t_min=self.t_min, discretization=self.discretization)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(**d)

    # ---------------------------------------------------------------- continuous pieces

    def beta(self, t):
        t = as_tensor(t)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def beta_integral(self, t):
        t = as_tensor(t)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    # ---------------------------------------------------------------- discrete table

    @cached_property
    def alpha2_table(self) -> torch.Tensor:
        """``alpha_i^2`` for latents ``i = 0..T`` (discrete mode)."""
        if self.discretization == "vp":
            times = torch.clamp(torch.arange(self.T + 1, dtype=DTYPE) / self.T, min=self.t_min)
            return torch.exp(-self.beta_integral(times))
        scale = 1000.0 / self.T
        betas = torch.linspace(1e-4 * scale, 0.02 * scale, self.T + 1, dtype=DTYPE)
        return torch.cumprod(1.0 - betas, dim=0)

    @cached_property
    def beta_table(self) -> torch.Tensor:
        a2 = self.alpha2_table
        return torch.cat([1.0 - a2[:1], 1.0 - a2[1:] / a2[:-1]])

    def index(self, t) -> torch.Tensor:
        """Grid index of a discrete time ``i / T``; raises if ``t`` is off-grid."""
        t = as_tensor(t)
        i = torch.round(t * self.T)
        if bool((torch.abs(t * self.T - i) > 1e-6).any()) or bool((i < 0).any()) or bool((i > self.T).any()):
            raise DomainError(f"time off the discrete grid of T={self.T}")
        return i.long()

    # ---------------------------------------------------------------- accessors

    def check_time(self, t):
        t = as_tensor(t)
        if self.continuous:
            if bool((t < self.t_min - _TIME_SLACK).any()) or bool((t > 1.0 + _TIME_SLACK).any()):
                raise DomainError(f"time outside [t_min={self.t_min}, 1]")
        else:
            self.index(t)
        return t

    def alpha2(self, t) -> torch.Tensor:
        t = self.check_time(t)
        if self.continuous:
            return torch.exp(-self.beta_integral(t))
        return self.alpha2_table[self.index(t)]

    def sigma2(self, t) -> torch.Tensor:
        t = self.check_time(t)
        if self.continuous:
            return -torch.expm1(-self.beta_integral(t))
        return 1.0 - self.alpha2_table[self.index(t)]

    def alpha(self, t) -> torch.Tensor:
        return torch.sqrt(self.alpha2(t))

    def sigma(self, t) -> torch.Tensor:
        return torch.sqrt(self.sigma2(t))

    def nu(self, t) -> torch.Tensor:
        """``log(sigma^2 / alpha^2)``."""
        t = self.check_time(t)
        if self.continuous:
            b = self.beta_integral(t)
            return torch.log(torch.expm1(b))
        return torch.log(self.sigma2(t) / self.alpha2(t))

    def at(self, t) -> ScheduleValues:
        """All schedule quantities at ``t``; time derivatives are NaN in discrete mode."""
        t = self.check_time(t)
        a2, s2 = self.alpha2(t), self.sigma2(t)
        a = torch.sqrt(a2)
        if self.continuous:
            b = self.beta(t)
            r = -0.5 * b
            return ScheduleValues(
                alpha=a, sigma=torch.sqrt(s2), sigma2=s2,
                dalpha_dt=r * a, dsigma2_dt=b * a2, r=r, g2=b,
                nu=self.nu(t),
            )
        nan = torch.full_like(a, float("nan"))
        return ScheduleValues(a, torch.sqrt(s2), s2, nan, nan, nan, nan, torch.log(s2 / a2))

    # ---------------------------------------------------------------- posterior variance

    def tilde_sigma2(self, s, t) -> torch.Tensor:
        """DDPM-consistent posterior variance ``(sigma_t^2 - alpha_t^2/alpha_s^2 sigma_s^2) sigma_s^2 / sigma_t^2``."""
        s, t = as_tensor(s), as_tensor(t)
        if bool((s > t + _TIME_SLACK).any()):
            raise DomainError("posterior variance needs s <= t")
        a2s, a2t = self.alpha2(s), self.alpha2(t)
        s2s, s2t = self.sigma2(s), self.sigma2(t)
        if self.continuous:
            # 1 - alpha_t^2/alpha_s^2 without cancellation; equals sigma_t^2 - (a_t/a_s)^2 sigma_s^2 under VP
            gap = -torch.expm1(self.beta_integral(s) - self.beta_integral(t))
        else:
            gap = s2t - a2t / a2s * s2s
        return torch.clamp(gap * s2s / s2t, min=0.0)

    def tilde_sigma2_nu(self, s, t) -> torch.Tensor:
        """Same variance written as ``sigma_s^2 (1 - exp(nu_s - nu_t))``."""
        s, t = as_tensor(s), as_tensor(t)
        if bool((s > t + _TIME_SLACK).any()):
            raise DomainError("posterior variance needs s <= t")
        return self.sigma2(s) * -torch.expm1(self.nu(s) - self.nu(t))

    # ---------------------------------------------------------------- time sampling

    def importance_normalizer(self) -> float:
        """``Z = int_{t_min}^1 dt / g^2(t)`` for linear beta."""
        if self.beta_max == self.beta_min:
            return (1.0 - self.t_min) / self.beta_min
        b0 = float(self.beta(self.t_min))
        return math.log(self.beta_max / b0) / (self.beta_max - self.beta_min)

    def importance_sample_time(self, generator: torch.Generator | None, n: int = 1):
        """Draw ``t ~ (1/g^2(t)) / Z`` on ``[t_min, 1]``; returns ``(t, Z g^2(t))``."""
        if not self.continuous:
            raise ContractError("importance sampling of time needs a continuous schedule")
        u = torch.rand(n, generator=generator, dtype=DTYPE)
        if self.beta_max == self.beta_min:
            t = self.t_min + (1.0 - self.t_min) * u
        else:
            b0 = float(self.beta(self.t_min))
            t = (b0 * (self.beta_max / b0) ** u - self.beta_min) / (self.beta_max - self.beta_min)
            t = torch.clamp(t, self.t_min, 1.0)
        return t, self.importance_normalizer() * self.beta(t)

    def grid(self, steps: int | None = None) -> torch.Tensor:
        """Ascending time grid: ``i/T`` (strided to ``steps`` points) or ``steps+1`` points on ``[t_min, 1]``."""
        if self.continuous:
            if steps is None or steps < 1:
                raise ContractError("continuous grid needs steps >= 1")
            return torch.linspace(self.t_min, 1.0, steps + 1, dtype=DTYPE)
        steps = self.T if steps is None else steps
        if steps < 1 or self.T % steps:
            raise ContractError(f"steps={steps} must divide T={self.T}")
        return torch.arange(0, self.T + 1, self.T // steps, dtype=DTYPE) / self.T

    @property
    def t_first(self) -> float:
        """Smallest latent time: ``t_min`` (continuous) or grid point 0 (discrete)."""
        return self.t_min if self.continuous else 0.0
