"""The NDM model container: schedule, transform and noise-prediction network.

Parameters are one flat vector ``[theta, phi]`` -- ``theta`` for the noise
predictor, ``phi`` for the transform -- so a single optimizer state covers both.
"""

from __future__ import annotations

import torch

from .nets import DTYPE, NetSpec, as_tensor, init_params, net_forward
from .schedule import Schedule
from .transform import Transform, transform_from_dict


def col(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape per-example scalars ``(B,)`` so they broadcast against ``(B, d)``."""
    v = as_tensor(v)
    if v.ndim == 1 and like.ndim == 2:
        return v[:, None]
    return v


class NDM:
    def __init__(self, schedule: Schedule, transform: Transform, eps_spec: NetSpec | None = None):
        self.schedule = schedule
        self.transform = transform
        self.eps_spec = eps_spec
        if eps_spec is not None and (eps_spec.x_dim != transform.data_dim or eps_spec.output_dim != transform.data_dim):
            raise ValueError("noise predictor must map R^d to R^d")

    @property
    def data_dim(self) -> int:
        return self.transform.data_dim

    @property
    def n_theta(self) -> int:
        return 0 if self.eps_spec is None else self.eps_spec.n_params

    @property
    def n_phi(self) -> int:
        return self.transform.n_params

    @property
    def n_params(self) -> int:
        return self.n_theta + self.n_phi

    def init_params(self, generator: torch.Generator | None = None) -> torch.Tensor:
        theta = torch.zeros(0, dtype=DTYPE) if self.eps_spec is None else init_params(self.eps_spec, generator)
        return torch.cat([theta, self.transform.init_params(generator)])

    def split(self, params: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if params.shape[0] != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape[0]}")
        return params[: self.n_theta], params[self.n_theta:]

    def eps_hat(self, z, t, theta) -> torch.Tensor:
        """Noise prediction; override in subclasses for hand-built predictors."""
        return net_forward(self.eps_spec, theta, z, t)

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule.to_dict(),
            "transform": self.transform.to_dict(),
            "eps_spec": None if self.eps_spec is None else self.eps_spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NDM":
        eps = d.get("eps_spec")
        return cls(
            Schedule.from_dict(d["schedule"]),
            transform_from_dict(d["transform"]),
            None if eps is None else NetSpec.from_dict(eps),
        )
