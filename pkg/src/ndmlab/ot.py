"""1-D NDM with a reverse process restricted to straight (dynamic-OT) trajectories.

The reverse flow is ``z_t = h(t, eps) = (1 - t) xhat(eps) + t eps`` with a strictly
increasing ``xhat``; its drift is ``eps - xhat(eps)`` evaluated at
``eps = h^{-1}(t, z)``.  The forward process is an ordinary NDM forward process
(learnable or identity transform), trained jointly with the monotone map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as nnf

from .errors import ContractError, InversionError
from .forward import forward_sde_drift, marginal_sample
from .model import NDM
from .nets import DTYPE, as_tensor
from .objective import LossBreakdown, prior_term, rec_term
from .solvers import rk45

log = logging.getLogger(__name__)

NEWTON_ITERS = 5
INVERSION_TOL = 1e-6


@dataclass(frozen=True)
class MonotoneMap:
    """``xhat(eps) = l(eps) + sum_k c_k tanh(w_k l(eps) + b_k) + b_out`` with ``l(eps) = a eps + b``.

    ``a``, ``c_k`` and ``w_k`` pass through softplus, so the map is strictly increasing
    for every parameter vector.  Layout: ``[a, b, w(H), b(H), c(H), b_out]``.
    """

    hidden: int = 32

    @property
    def n_params(self) -> int:
        return 3 + 3 * self.hidden

    def init_params(self, generator: torch.Generator | None = None) -> torch.Tensor:
        H = self.hidden
        p = torch.zeros(self.n_params, dtype=DTYPE)
        p[0] = math.log(math.e - 1.0)  # softplus -> a = 1
        p[2: 2 + H] = torch.randn(H, generator=generator, dtype=DTYPE) - 1.0
        p[2 + H: 2 + 2 * H] = torch.randn(H, generator=generator, dtype=DTYPE)
        p[2 + 2 * H: 2 + 3 * H] = -6.0  # tiny c_k: starts close to the identity map
        return p

    def identity_params(self) -> torch.Tensor:
        """Parameters for which ``xhat`` is (numerically) the identity."""
        p = torch.zeros(self.n_params, dtype=DTYPE)
        p[0] = math.log(math.e - 1.0)
        p[2 + 2 * self.hidden: 2 + 3 * self.hidden] = -60.0
        return p

    def _unpack(self, p):
        H = self.hidden
        a = nnf.softplus(p[0])
        b = p[1]
        w = nnf.softplus(p[2: 2 + H])
        bh = p[2 + H: 2 + 2 * H]
        c = nnf.softplus(p[2 + 2 * H: 2 + 3 * H])
        return a, b, w, bh, c, p[2 + 3 * H]

    def derivatives(self, p, eps) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """``(xhat, xhat', xhat'')`` at ``eps`` (any shape)."""
        eps = as_tensor(eps)
        a, b, w, bh, c, bo = self._unpack(p)
        lin = a * eps + b
        u = lin[..., None] * w + bh
        th = torch.tanh(u)
        sech2 = 1.0 - th * th
        val = lin + (c * th).sum(-1) + bo
        d1 = a * (1.0 + (c * w * sech2).sum(-1))
        d2 = a * a * (c * w * w * (-2.0 * th * sech2)).sum(-1)
        return val, d1, d2

    def __call__(self, p, eps):
        return self.derivatives(p, eps)[0]


def h(mono: MonotoneMap, p, t, eps) -> torch.Tensor:
    """Straight-line interpolation ``(1 - t) xhat(eps) + t eps``."""
    t, eps = as_tensor(t), as_tensor(eps)
    return (1.0 - t) * mono(p, eps) + t * eps


def _h_and_slope(mono, p, t, eps):
    val, d1, _ = mono.derivatives(p, eps)
    return (1.0 - t) * val + t * eps, (1.0 - t) * d1 + t


def _bisect(mono, p, t, z, eps):
    lo, hi = eps - 1.0, eps + 1.0
    for _ in range(200):
        below = h(mono, p, t, lo) > z
        above = h(mono, p, t, hi) < z
        if not bool(below.any()) and not bool(above.any()):
            break
        lo = torch.where(below, lo - 2.0 * (hi - lo), lo)
        hi = torch.where(above, hi + 2.0 * (hi - lo), hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        go_right = h(mono, p, t, mid) < z
        lo = torch.where(go_right, mid, lo)
        hi = torch.where(go_right, hi, mid)
        if bool(((hi - lo) < 1e-13 * (1.0 + mid.abs())).all()):
            break
    return 0.5 * (lo + hi)


@torch.no_grad()
def _invert(mono, p, t, z):
    t, z = as_tensor(t), as_tensor(z)
    t = t.expand_as(z) if t.ndim else t
    eps = z.clone()
    for _ in range(NEWTON_ITERS):
        hv, slope = _h_and_slope(mono, p, t, eps)
        eps = eps - (hv - z) / slope
    resid = (h(mono, p, t, eps) - z).abs()
    bad = ~(resid < INVERSION_TOL)
    if bool(bad.any()):
        log.warning("Newton inversion did not converge for %d point(s); bisecting", int(bad.sum()))
        tb = t[bad] if t.ndim else t
        eps[bad] = _bisect(mono, p, tb, z[bad], torch.where(torch.isfinite(eps[bad]), eps[bad], z[bad]))
        resid = (h(mono, p, t, eps) - z).abs()
        if not bool((resid < INVERSION_TOL).all()):
            raise InversionError(f"inversion residual {float(resid.max()):.3g} after bisection")
    return eps


def h_inverse(mono: MonotoneMap, p, t, z) -> torch.Tensor:
    """``eps`` with ``h(t, eps) = z``: five Newton steps from ``eps = z``, bisection as fallback.

    The returned value carries implicit-function gradients with respect to ``p``
    and ``z`` (one differentiable Newton step from the detached root).
    """
    t, z = as_tensor(t), as_tensor(z)
    eps = _invert(mono, p.detach(), t, z.detach())
    hv, slope = _h_and_slope(mono, p, t, eps)
    return eps - (hv - z) / slope


def ot_reverse_drift(mono: MonotoneMap, p, t, z) -> torch.Tensor:
    """``dz/dt = eps - xhat(eps)`` at ``eps = h^{-1}(t, z)``."""
    eps = h_inverse(mono, p, t, z)
    return eps - mono(p, eps)


def ot_log_density(mono: MonotoneMap, p, t, z) -> torch.Tensor:
    """``log p(z_t)`` by change of variables from ``eps ~ N(0, 1)``."""
    t = as_tensor(t)
    eps = h_inverse(mono, p, t, z)
    _, d1, _ = mono.derivatives(p, eps)
    jac = (1.0 - t) * d1 + t
    return -0.5 * eps * eps - 0.5 * math.log(2 * math.pi) - torch.log(jac)


def ot_score(mono: MonotoneMap, p, t, z) -> torch.Tensor:
    """``d/dz log p(z_t)`` differentiated analytically through the inverse map."""
    t = as_tensor(t)
    eps = h_inverse(mono, p, t, z)
    _, d1, d2 = mono.derivatives(p, eps)
    jac = (1.0 - t) * d1 + t
    return (-eps - (1.0 - t) * d2 / jac) / jac


class OTModel:
    """Forward NDM (1-D) plus monotone reverse map; params are ``[theta_mono, phi]``."""

    def __init__(self, ndm: NDM, mono: MonotoneMap):
        if ndm.data_dim != 1:
            raise ContractError("the restricted OT reverse process is 1-D only")
        if not ndm.schedule.continuous:
            raise ContractError("the restricted OT reverse process needs a continuous schedule")
        self.ndm = ndm
        self.mono = mono

    @property
    def n_params(self) -> int:
        return self.mono.n_params + self.ndm.n_phi

    def init_params(self, generator=None) -> torch.Tensor:
        return torch.cat([self.mono.init_params(generator), self.ndm.transform.init_params(generator)])

    def split(self, params):
        return params[: self.mono.n_params], params[self.mono.n_params:]

    def reverse_sde_drift(self, theta, t, z) -> torch.Tensor:
        """``f_theta - (g^2 / 2) score``, the reverse-time SDE sharing the flow's marginals."""
        g2 = self.ndm.schedule.beta(t)
        return ot_reverse_drift(self.mono, theta, t, z) - 0.5 * g2 * ot_score(self.mono, theta, t, z)

    def to_dict(self):
        return {"ndm": self.ndm.to_dict(), "hidden": self.mono.hidden}

    @classmethod
    def from_dict(cls, d):
        return cls(NDM.from_dict(d["ndm"]), MonotoneMap(d["hidden"]))


def ot_terms(model: OTModel, params, x, generator):
    """Per-example ``(L_prior, L_rec, L_diff)``; ``L_diff`` uses uniform time on ``[t_min, 1]``."""
    ndm = model.ndm
    sched = ndm.schedule
    theta, phi = model.split(params)
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != 1:
        raise ContractError("OT loss expects data of shape (B, 1)")
    B = x.shape[0]
    t = sched.t_min + (1.0 - sched.t_min) * torch.rand(B, generator=generator, dtype=DTYPE)
    eps = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    eps0 = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    z = marginal_sample(ndm, phi, x, t, eps)
    f_fwd = forward_sde_drift(ndm, phi, x, z, t)[:, 0]
    f_rev = model.reverse_sde_drift(theta, t, z[:, 0])
    g2 = sched.beta(t)
    l_diff = (1.0 - sched.t_min) * (f_fwd - f_rev) ** 2 / (2.0 * g2)
    z0 = marginal_sample(ndm, phi, x, sched.t_min, eps0)
    return prior_term(ndm, phi, x), rec_term(ndm, x, z0), l_diff


def ot_loss(model: OTModel, params, x, generator) -> LossBreakdown:
    p, r, d = ot_terms(model, params, x, generator)
    return LossBreakdown(p.mean(), r.mean(), d.mean(), d.shape[0])


@torch.no_grad()
def ot_flow_sample(model: OTModel, params, eps, atol=1e-9, rtol=1e-9, t_end: float = 0.0, record=True):
    """Integrate the straight-line flow from ``t = 1`` (``z = eps``) down to ``t_end``."""
    theta, _ = model.split(params)
    res = rk45(lambda t, z: ot_reverse_drift(model.mono, theta, t, z), 1.0, t_end,
               as_tensor(eps).reshape(-1), atol=atol, rtol=rtol, record=record)
    return res


def straightness(times, states) -> torch.Tensor:
    """Per-chain ``(path length - chord length) / chord`` in the ``(t, z)`` plane."""
    t = torch.as_tensor(times, dtype=DTYPE)
    zs = torch.stack([as_tensor(s) for s in states])  # (K, B)
    dt = (t[1:] - t[:-1])[:, None]
    dz = zs[1:] - zs[:-1]
    path = torch.sqrt(dt * dt + dz * dz).sum(0)
    chord = torch.sqrt((t[-1] - t[0]) ** 2 + (zs[-1] - zs[0]) ** 2)
    return (path - chord) / chord
