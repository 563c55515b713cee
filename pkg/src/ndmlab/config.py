"""Run configuration: TOML file + command-line overrides, validated into model objects.

Precedence is flag > file > default.  The training seed has no default: a run
without one is rejected instead of falling back to wall-clock seeding.
"""

from __future__ import annotations

import copy
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

from .data import DatasetSpec
from .errors import ContractError
from .model import NDM
from .nets import NetSpec
from .schedule import Schedule
from .train import TrainConfig
from .transform import DiagonalTransform, IdentityTransform, LearnableTransform

DEFAULTS: dict = {
    "run_id": "run",
    "output_dir": "runs/run",
    "dataset": {"kind": "checkerboard-2d", "size": 20_000, "seed": 0, "normalize": True},
    "schedule": {"mode": "continuous", "T": 1000, "beta_min": 0.1, "beta_max": 20.0, "t_min": 1e-3,
                 "discretization": "linear"},
    "transform": {"kind": "learnable", "hidden": [64, 64], "activation": "silu", "time_embedding": "raw",
                  "c": None},
    "eps_net": {"hidden": [64, 64, 64], "activation": "silu", "time_embedding": "sinusoidal",
                "n_frequencies": 8},
    "train": {"batch_size": 256, "iterations": 2000, "lr": 2e-3, "warmup": 100, "lr_decay": "constant",
              "loss": "nelbo", "checkpoint_every": 0, "seed": None},
    "sampler": {"method": "ancestral", "steps": None, "atol": 1e-5, "rtol": 1e-5},
    "dot": {"hidden": 32},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ContractError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ContractError(f"config key {where!r} must be a table")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Merge defaults, the TOML file and ``overrides`` (``{"train.seed": 3, ...}``)."""
    file_cfg: dict = {}
    if path is not None:
        try:
            file_cfg = tomllib.loads(Path(path).read_text())
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ContractError(f"invalid TOML in {path}: {exc}") from exc
    cfg = _merge(DEFAULTS, file_cfg)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        *head, last = dotted.split(".")
        node = cfg
        for h in head:
            node = node[h]
        if last not in node:
            raise ContractError(f"unknown config key {dotted!r}")
        node[last] = value
    if cfg["train"]["seed"] is None:
        raise ContractError("train.seed is required (no wall-clock seeding)")
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    dataset_spec(cfg)
    build_schedule(cfg)
    train_config(cfg)
    build_ndm(cfg, eps=True)


def dataset_spec(cfg: dict) -> DatasetSpec:
    return DatasetSpec(**cfg["dataset"])


def build_schedule(cfg: dict) -> Schedule:
    return Schedule(**cfg["schedule"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(**{k: t[k] for k in ("batch_size", "iterations", "lr", "warmup", "lr_decay", "seed",
                                            "loss", "checkpoint_every")})


def build_transform(cfg: dict, data_dim: int):
    t = cfg["transform"]
    kind = t["kind"]
    if kind == "identity":
        return IdentityTransform(data_dim)
    if kind == "fixed-diagonal":
        c = t.get("c")
        if c is None or len(c) != data_dim:
            raise ContractError("fixed-diagonal transform needs transform.c with one entry per dimension")
        return DiagonalTransform(c)
    if kind == "learnable":
        spec = NetSpec.for_data(data_dim, tuple(t["hidden"]), activation=t["activation"],
                                time_embedding=t["time_embedding"])
        return LearnableTransform(spec)
    raise ContractError(f"unknown transform kind {kind!r}")


def build_ndm(cfg: dict, eps: bool = True) -> NDM:
    d = dataset_spec(cfg).dim
    e = cfg["eps_net"]
    spec = None
    if eps:
        spec = NetSpec.for_data(d, tuple(e["hidden"]), activation=e["activation"],
                                time_embedding=e["time_embedding"], n_frequencies=e["n_frequencies"])
    return NDM(build_schedule(cfg), build_transform(cfg, d), spec)
