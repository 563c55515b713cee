"""Forward data transformations ``F(x, t)`` and their exact time derivatives.

All transforms share one calling convention: ``apply(x, t, phi)`` and
``time_derivative(x, t, phi)`` with ``x`` of shape ``(B, d)``, ``t`` scalar or
``(B,)`` and ``phi`` the flat transform parameters (ignored by fixed kinds).
"""

from __future__ import annotations

import torch

from .errors import ContractError
from .nets import DTYPE, NetSpec, as_tensor, init_params, net_forward, net_forward_jvp


def _check_x(x, d):
    x = as_tensor(x)
    if x.shape[-1] != d:
        raise ContractError(f"expected data of width {d}, got shape {tuple(x.shape)}")
    return x


def _time_column(t, x):
    t = as_tensor(t)
    if t.ndim == 0 or x.ndim == 1:
        return t
    return t.reshape(-1, 1)


class Transform:
    kind = "base"

    def __init__(self, data_dim: int):
        self.data_dim = int(data_dim)

    @property
    def n_params(self) -> int:
        return 0

    def init_params(self, generator=None) -> torch.Tensor:
        return torch.zeros(0, dtype=DTYPE)

    def apply_jvp(self, x, t, phi=None) -> tuple[torch.Tensor, torch.Tensor]:
        """``(F(x, t), dF/dt(x, t))`` in one pass."""
        raise NotImplementedError

    def apply(self, x, t, phi=None) -> torch.Tensor:
        return self.apply_jvp(x, t, phi)[0]

    def time_derivative(self, x, t, phi=None) -> torch.Tensor:
        return self.apply_jvp(x, t, phi)[1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "data_dim": self.data_dim}


class IdentityTransform(Transform):
    """``F(x, t) = x``: the DDPM / DDIM special case."""

    kind = "identity"

    def apply(self, x, t, phi=None):
        return _check_x(x, self.data_dim)

    def apply_jvp(self, x, t, phi=None):
        x = _check_x(x, self.data_dim)
        return x, torch.zeros_like(x)


class DiagonalTransform(Transform):
    """``F(x, t)_j = c_j**t * x_j`` with ``c_j > 0``: identity at 0, ``diag(c)`` at 1."""

    kind = "fixed-diagonal"

    def __init__(self, c):
        c = as_tensor(c).reshape(-1)
        if bool((c <= 0).any()):
            raise ContractError("diagonal scales must be positive")
        super().__init__(c.shape[0])
        self.c = c
        self.log_c = torch.log(c)

    def apply_jvp(self, x, t, phi=None):
        x = _check_x(x, self.data_dim)
        scale = torch.exp(_time_column(t, x) * self.log_c)
        y = scale * x
        return y, self.log_c * y

    def to_dict(self):
        return {**super().to_dict(), "c": self.c.tolist()}


class LearnableTransform(Transform):
    """``F(x, t) = (1 - t) x + t Fbar(x, t)``, exactly the identity at ``t = 0``.

    With ``residual=True`` (the default) ``Fbar(x, t) = x + net(x, t)``, so a
    zero-initialised output layer makes ``F`` start as the identity.
    """

    kind = "learnable"

    def __init__(self, spec: NetSpec, residual: bool = True):
        if spec.x_dim != spec.output_dim:
            raise ContractError("transform network must map R^d to R^d")
        super().__init__(spec.output_dim)
        self.spec = spec
        self.residual = residual

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def init_params(self, generator=None) -> torch.Tensor:
        return init_params(self.spec, generator, zero_last=True)

    def fbar_jvp(self, x, t, phi):
        y, dy = net_forward_jvp(self.spec, phi, x, t)
        if self.residual:
            y = y + x
        return y, dy

    def fbar(self, x, t, phi):
        y = net_forward(self.spec, phi, x, t)
        return y + x if self.residual else y

    def apply(self, x, t, phi=None):
        x = _check_x(x, self.data_dim)
        tc = _time_column(t, x)
        return (1.0 - tc) * x + tc * self.fbar(x, t, phi)

    def apply_jvp(self, x, t, phi=None):
        x = _check_x(x, self.data_dim)
        tc = _time_column(t, x)
        fb, dfb = self.fbar_jvp(x, t, phi)
        return (1.0 - tc) * x + tc * fb, -x + fb + tc * dfb

    def to_dict(self):
        return {**super().to_dict(), "net_spec": self.spec.to_dict(), "residual": self.residual}


def transform_from_dict(d: dict) -> Transform:
    kind = d["kind"]
    if kind == "identity":
        return IdentityTransform(d["data_dim"])
    if kind == "fixed-diagonal":
        return DiagonalTransform(d["c"])
    if kind == "learnable":
        return LearnableTransform(NetSpec.from_dict(d["net_spec"]), residual=d.get("residual", True))
    raise ContractError(f"unknown transform kind {kind!r}")
