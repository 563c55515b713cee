"""Small MLP engine on flat float64 parameter vectors.

Parameters live in a single 1-D tensor whose layout is fixed by a
:class:`NetSpec`; every function here is pure in ``(spec, params, inputs)``.
Reverse-mode gradients come from torch autograd.  The derivative with respect
to the time input is propagated forward-mode by hand (value and tangent in the
same sweep), so it costs one pass regardless of the output width and stays
differentiable for reverse mode on top of it.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field, replace

import torch

from .errors import ContractError, NonFiniteError

DTYPE = torch.float64

_CHECK_FINITE = contextvars.ContextVar("ndmlab_check_finite", default=False)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Raise :class:`NonFiniteError` from inside forward passes run in this block."""
    token = _CHECK_FINITE.set(enabled)
    try:
        yield
    finally:
        _CHECK_FINITE.reset(token)


@dataclass(frozen=True)
class NetSpec:
    """Shape of an MLP ``(x, t) -> y``.

    ``input_dim`` counts the full first-layer width, i.e. the data part plus the
    time embedding (1 for raw-scalar time, ``2 * n_frequencies`` for sinusoidal).
    """

    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "silu"
    time_embedding: str = "raw"
    n_frequencies: int = 8
    max_frequency: float = 64.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.time_embedding not in ("raw", "sinusoidal"):
            raise ContractError(f"unknown time embedding {self.time_embedding!r}")
        if self.time_embedding == "sinusoidal" and self.n_frequencies < 1:
            raise ContractError("sinusoidal embedding needs at least one frequency")
        if min((self.input_dim, self.output_dim) + self.hidden_widths) < 1:
            raise ContractError("all layer widths must be >= 1")
        if self.x_dim < 0:
            raise ContractError(
                f"input_dim={self.input_dim} is smaller than the time embedding width {self.embed_dim}"
            )

    @classmethod
    def for_data(cls, data_dim: int, hidden_widths, output_dim=None, **kw) -> "NetSpec":
        """Build a spec from the data width rather than the total input width."""
        emb = 1 if kw.get("time_embedding", "raw") == "raw" else 2 * kw.get("n_frequencies", 8)
        return cls(
            input_dim=data_dim + emb,
            hidden_widths=hidden_widths,
            output_dim=data_dim if output_dim is None else output_dim,
            **kw,
        )

    @property
    def embed_dim(self) -> int:
        return 1 if self.time_embedding == "raw" else 2 * self.n_frequencies

    @property
    def x_dim(self) -> int:
        return self.input_dim - self.embed_dim

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden_widths + (self.output_dim,)

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def frequencies(self) -> torch.Tensor:
        if self.n_frequencies == 1:
            return torch.ones(1, dtype=DTYPE)
        return torch.logspace(0.0, math.log10(self.max_frequency), self.n_frequencies, dtype=DTYPE)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "time_embedding": self.time_embedding,
            "n_frequencies": self.n_frequencies,
            "max_frequency": self.max_frequency,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(**{**d, "hidden_widths": tuple(d["hidden_widths"])})


def _silu(h):
    return h * torch.sigmoid(h)


def _silu_prime(h):
    s = torch.sigmoid(h)
    return s * (1.0 + h * (1.0 - s))


def _tanh_prime(h):
    return 1.0 - torch.tanh(h) ** 2


def _softplus_prime(h):
    return torch.sigmoid(h)


_ACTIVATIONS = {
    "silu": (_silu, _silu_prime),
    "tanh": (torch.tanh, _tanh_prime),
    "softplus": (torch.nn.functional.softplus, _softplus_prime),
}


def init_params(spec: NetSpec, generator: torch.Generator | None = None, zero_last: bool = False) -> torch.Tensor:
    """Fan-in scaled Gaussian weights, zero biases."""
    chunks = []
    w = spec.widths
    n_layers = len(w) - 1
    for i, (fan_in, fan_out) in enumerate(zip(w[:-1], w[1:])):
        if zero_last and i == n_layers - 1:
            W = torch.zeros(fan_in * fan_out, dtype=DTYPE)
        else:
            W = torch.randn(fan_in * fan_out, generator=generator, dtype=DTYPE) / math.sqrt(fan_in)
        chunks += [W, torch.zeros(fan_out, dtype=DTYPE)]
    return torch.cat(chunks)


def unflatten(spec: NetSpec, params: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Views ``(W, b)`` per layer, with ``W`` of shape ``(fan_in, fan_out)``."""
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ContractError(f"expected {spec.n_params} parameters, got shape {tuple(params.shape)}")
    layers = []
    offset = 0
    w = spec.widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        W = params[offset: offset + fan_in * fan_out].view(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset: offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def _prepare(spec: NetSpec, x, t):
    x = as_tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.unsqueeze(0)
    if x.ndim != 2 or x.shape[1] != spec.x_dim:
        raise ContractError(f"expected inputs of width {spec.x_dim}, got shape {tuple(x.shape)}")
    t = as_tensor(t)
    if not bool(torch.isfinite(t).all()):
        raise ContractError("time input must be finite")
    t = t.reshape(-1) if t.ndim else t.reshape(1)
    t = t.expand(x.shape[0]) if t.shape[0] == 1 else t
    if t.shape[0] != x.shape[0]:
        raise ContractError(f"batch mismatch: {x.shape[0]} inputs, {t.shape[0]} times")
    return x, t, squeeze


def embed_time(spec: NetSpec, t: torch.Tensor):
    """Return the embedding of ``t`` (shape ``(B, embed_dim)``) and its derivative in ``t``."""
    if spec.time_embedding == "raw":
        return t[:, None], torch.ones_like(t)[:, None]
    w = spec.frequencies()
    arg = t[:, None] * w
    s, c = torch.sin(arg), torch.cos(arg)
    return torch.cat([s, c], dim=1), torch.cat([w * c, -w * s], dim=1)


def _check(h, layer):
    if _CHECK_FINITE.get() and not bool(torch.isfinite(h).all()):
        raise NonFiniteError("non-finite activation", layer=layer)


def net_forward(spec: NetSpec, params: torch.Tensor, x, t) -> torch.Tensor:
    """Evaluate the network; ``x`` is ``(B, x_dim)`` or ``(x_dim,)``, ``t`` scalar or ``(B,)``."""
    x, t, squeeze = _prepare(spec, x, t)
    act = _ACTIVATIONS[spec.activation][0]
    emb, _ = embed_time(spec, t)
    a = torch.cat([x, emb], dim=1)
    layers = unflatten(spec, params)
    for i, (W, b) in enumerate(layers):
        h = a @ W + b
        _check(h, i)
        a = act(h) if i < len(layers) - 1 else h
    return a[0] if squeeze else a


def net_forward_jvp(spec: NetSpec, params: torch.Tensor, x, t) -> tuple[torch.Tensor, torch.Tensor]:
    """Output and its time derivative from a single forward-mode sweep."""
    x, t, squeeze = _prepare(spec, x, t)
    act, act_prime = _ACTIVATIONS[spec.activation]
    emb, demb = embed_time(spec, t)
    a = torch.cat([x, emb], dim=1)
    da = torch.cat([torch.zeros_like(x), demb], dim=1)
    layers = unflatten(spec, params)
    for i, (W, b) in enumerate(layers):
        h = a @ W + b
        dh = da @ W
        _check(h, i)
        if i < len(layers) - 1:
            a, da = act(h), act_prime(h) * dh
        else:
            a, da = h, dh
    if squeeze:
        return a[0], da[0]
    return a, da


def net_time_derivative(spec: NetSpec, params: torch.Tensor, x, t) -> torch.Tensor:
    return net_forward_jvp(spec, params, x, t)[1]


def net_grad(params: torch.Tensor, loss_closure, create_graph: bool = False) -> torch.Tensor:
    """Gradient of ``loss_closure(params)`` with respect to the flat parameter vector.

    Forward passes inside the closure are checked for non-finite activations and
    the offending layer is reported in the raised :class:`NonFiniteError`.
    """
    p = params.detach().requires_grad_(True)
    with finite_checks():
        loss = loss_closure(p)
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError("non-finite loss")
    if not loss.requires_grad:
        return torch.zeros_like(params)
    (g,) = torch.autograd.grad(loss, p, create_graph=create_graph, allow_unused=True)
    if g is None:
        return torch.zeros_like(params)
    if not bool(torch.isfinite(g).all()):
        raise NonFiniteError("non-finite gradient")
    return g


# --------------------------------------------------------------------------- Adam


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup to ``peak``, then constant or linear ("polynomial") decay."""

    peak: float = 1e-3
    warmup_steps: int = 0
    kind: str = "constant"
    total_steps: int = 0
    floor: float = 1e-8

    def __call__(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.floor + (self.peak - self.floor) * (step + 1) / self.warmup_steps
        if self.kind == "constant" or self.total_steps <= self.warmup_steps:
            return self.peak
        frac = min(1.0, (step - self.warmup_steps) / max(1, self.total_steps - self.warmup_steps))
        return self.peak + (self.floor - self.peak) * frac

    def to_dict(self) -> dict:
        return dict(peak=self.peak, warmup_steps=self.warmup_steps, kind=self.kind,
                    total_steps=self.total_steps, floor=self.floor)


@dataclass(frozen=True)
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: LRSchedule = field(default_factory=LRSchedule)

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(m=torch.zeros(n, dtype=DTYPE), v=torch.zeros(n, dtype=DTYPE), **kw)


def adam_step(params: torch.Tensor, grads: torch.Tensor, state: AdamState) -> tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam update; returns new arrays and leaves inputs untouched."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ContractError("params, grads and moments must have the same length")
    if not bool(torch.isfinite(grads).all()):
        raise NonFiniteError("non-finite gradient rejected by adam_step")
    with torch.no_grad():
        k = state.step + 1
        m = state.beta1 * state.m + (1.0 - state.beta1) * grads
        v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
        m_hat = m / (1.0 - state.beta1 ** k)
        v_hat = v / (1.0 - state.beta2 ** k)
        new = params.detach() - state.lr(state.step) * m_hat / (torch.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, step=k)
