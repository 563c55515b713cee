"""Deterministic minibatch training driven by a single seeded generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import torch

from .errors import ContractError, NonFiniteError
from .nets import AdamState, LRSchedule, adam_step, as_tensor, net_grad
from .objective import LossBreakdown, loss_continuous, loss_discrete, loss_simple

log = logging.getLogger(__name__)

LOSS_MODES = ("nelbo", "simple")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    iterations: int = 2000
    lr: float = 2e-3
    warmup: int = 100
    lr_decay: str = "constant"
    seed: int = 0
    loss: str = "nelbo"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 0 or self.lr <= 0 or self.warmup < 0:
            raise ContractError("batch_size >= 1, iterations >= 0, lr > 0 and warmup >= 0 required")
        if self.lr_decay not in ("constant", "polynomial"):
            raise ContractError("lr_decay must be 'constant' or 'polynomial'")
        if self.loss not in LOSS_MODES:
            raise ContractError(f"loss must be one of {LOSS_MODES}")

    def lr_schedule(self) -> LRSchedule:
        return LRSchedule(peak=self.lr, warmup_steps=self.warmup, kind=self.lr_decay,
                          total_steps=self.iterations)


@dataclass
class TrainState:
    params: torch.Tensor
    adam: AdamState
    generator: torch.Generator
    log: list = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.adam.step


def ndm_objective(ndm, mode: str = "nelbo") -> Callable:
    """Loss function ``(params, batch, generator) -> LossBreakdown`` for an :class:`NDM`."""
    if mode == "simple":
        def simple(params, x, g):
            v = loss_simple(ndm, params, x, g)
            z = torch.zeros((), dtype=v.dtype)
            return LossBreakdown(z, z, v, x.shape[0])
        return simple
    return (lambda p, x, g: loss_continuous(ndm, p, x, g)) if ndm.schedule.continuous else \
        (lambda p, x, g: loss_discrete(ndm, p, x, g))


def init_state(params, cfg: TrainConfig) -> TrainState:
    g = torch.Generator().manual_seed(cfg.seed)
    return TrainState(as_tensor(params).detach().clone(), AdamState.zeros(params.shape[0], lr=cfg.lr_schedule()), g)


def train(objective: Callable, data: torch.Tensor, cfg: TrainConfig, params=None, state: TrainState | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run ``cfg.iterations`` Adam steps; one log row ``(step, l_prior, l_rec, l_diff, total)`` per step.

    Non-finite losses or gradients raise :class:`NonFiniteError` before the
    parameters are touched, so ``state`` still holds the last good iterate.
    """
    if state is None:
        if params is None:
            raise ContractError("pass initial params or a state")
        state = init_state(params, cfg)
    data = as_tensor(data)
    n = data.shape[0]
    for _ in range(cfg.iterations):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=state.generator)
        batch = data[idx]
        rec = {}

        def closure(p):
            lb = objective(p, batch, state.generator)
            rec["lb"] = lb
            return lb.total

        try:
            grads = net_grad(state.params, closure)
        except NonFiniteError as exc:
            log.error("step %d: %s", state.step, exc)
            raise
        lb = rec["lb"]
        state.params, state.adam = adam_step(state.params, grads, state.adam)
        state.log.append((state.step, *(float(v.detach()) for v in (lb.l_prior, lb.l_rec, lb.l_diff, lb.total))))
        if on_checkpoint is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state
