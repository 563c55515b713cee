"""Explicit ODE integrators on batched torch states.

``rk45`` is the Dormand-Prince 5(4) pair with local extrapolation and FSAL.
The step is accepted when the error estimate, scaled by ``atol + rtol * |y|``
and RMS-reduced over each chain (max over the leading batch axis), is <= 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ContractError, StiffIntegrationError

_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# difference between the 5th- and embedded 4th-order weights
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


@dataclass
class ODEResult:
    y: torch.Tensor
    ts: list = field(default_factory=list)
    ys: list = field(default_factory=list)
    n_steps: int = 0
    n_rejected: int = 0
    nfev: int = 0


def _error_norm(err, y0, y1, atol, rtol):
    scale = atol + rtol * torch.maximum(y0.abs(), y1.abs())
    ratio = (err / scale) ** 2
    if ratio.ndim >= 2:
        return float(torch.sqrt(ratio.reshape(ratio.shape[0], -1).mean(1)).max())
    return float(torch.sqrt(ratio.mean()))


def rk45(f, t0: float, t1: float, y0: torch.Tensor, atol: float = 1e-6, rtol: float = 1e-6,
         h0: float | None = None, max_steps: int = 100_000, record: bool = False) -> ODEResult:
    """Integrate ``dy/dt = f(t, y)`` from ``t0`` to ``t1`` (either direction)."""
    if atol <= 0 or rtol <= 0:
        raise ContractError("tolerances must be positive")
    span = t1 - t0
    out = ODEResult(y=y0)
    if span == 0:
        return out
    direction = 1.0 if span > 0 else -1.0
    t, y = float(t0), y0
    h = abs(h0) if h0 is not None else 0.01 * abs(span)
    k1 = f(t, y)
    out.nfev = 1
    if record:
        out.ts.append(t)
        out.ys.append(y)
    while direction * (t1 - t) > 0:
        if out.n_steps + out.n_rejected >= max_steps:
            raise StiffIntegrationError("step budget exhausted", t=t, h=h,
                                        n_steps=out.n_steps, n_rejected=out.n_rejected)
        h = min(h, abs(t1 - t))
        if h <= 1e-14 * max(1.0, abs(t)):
            raise StiffIntegrationError("step size underflow", t=t, h=h,
                                        n_steps=out.n_steps, n_rejected=out.n_rejected)
        hs = direction * h
        ks = [k1]
        for i in range(1, 7):
            yi = y
            for a, k in zip(_A[i], ks):
                if a != 0.0:
                    yi = yi + hs * a * k
            ks.append(f(t + _C[i] * hs, yi))
        out.nfev += 6
        y_new = y
        for b, k in zip(_B5, ks):
            if b != 0.0:
                y_new = y_new + hs * b * k
        err = sum(e * k for e, k in zip(_E, ks) if e != 0.0) * hs
        en = _error_norm(err, y, y_new, atol, rtol)
        if not torch.isfinite(torch.as_tensor(en)):
            en = float("inf")
        if en <= 1.0:
            t = t + hs if abs(t1 - (t + hs)) > 1e-15 * max(1.0, abs(t1)) else t1
            y = y_new
            k1 = ks[6]
            out.n_steps += 1
            if record:
                out.ts.append(t)
                out.ys.append(y)
            factor = 5.0 if en == 0 else min(5.0, 0.9 * en ** -0.2)
        else:
            out.n_rejected += 1
            factor = 0.2 if en == float("inf") else max(0.2, 0.9 * en ** -0.2)
        h = h * factor
    out.y = y
    return out


def rk4(f, t0: float, t1: float, y0: torch.Tensor, n_steps: int) -> torch.Tensor:
    """Classical fixed-step fourth-order Runge-Kutta."""
    if n_steps < 1:
        raise ContractError("n_steps must be >= 1")
    h = (t1 - t0) / n_steps
    y = y0
    for i in range(n_steps):
        t = t0 + i * h
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y
