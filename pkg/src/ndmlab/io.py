"""Checkpoint and CSV serialization.

Checkpoints are JSON documents written through a temporary file and an atomic
rename, so a crash mid-write never leaves a truncated checkpoint behind.  Every
CSV starts with a ``# config_hash=...`` row identifying the run that produced it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path

import torch

from .errors import ContractError
from .nets import DTYPE, AdamState, LRSchedule

FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _floats(t: torch.Tensor) -> list:
    return [float(v) for v in t.detach().reshape(-1).tolist()]


def adam_to_dict(state: AdamState) -> dict:
    return {
        "m": _floats(state.m), "v": _floats(state.v), "step": state.step,
        "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "lr": state.lr.to_dict(),
    }


def adam_from_dict(d: dict) -> AdamState:
    return AdamState(
        m=torch.tensor(d["m"], dtype=DTYPE), v=torch.tensor(d["v"], dtype=DTYPE), step=int(d["step"]),
        beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"], lr=LRSchedule(**d["lr"]),
    )


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, *, model: dict, params: torch.Tensor, adam: AdamState | None, rng_seed: int,
                    step: int, config: dict | None = None, extra: dict | None = None) -> None:
    """Write ``{format_version, net_spec, params, adam_state, rng_seed, step, ...}`` atomically.

    Python's float repr round-trips exactly, so reloaded parameters are bit-identical.
    """
    doc = {
        "format_version": FORMAT_VERSION,
        "net_spec": model,
        "params": _floats(params),
        "adam_state": None if adam is None else adam_to_dict(adam),
        "rng_seed": int(rng_seed),
        "step": int(step),
        "config": config,
        "config_hash": config_hash(config or {}),
    }
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc))


def load_checkpoint(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    doc["params"] = torch.tensor(doc["params"], dtype=DTYPE)
    if doc.get("adam_state") is not None:
        doc["adam_state"] = adam_from_dict(doc["adam_state"])
    return doc


def write_csv(path, header, rows, cfg_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> tuple[str, list, list]:
    """Returns ``(config_hash, header, rows)`` with rows as lists of strings."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash="):
            raise ContractError(f"{path} lacks the config-hash header row")
        r = csv.reader(fh)
        header = next(r)
        return first.split("=", 1)[1], header, list(r)


def sample_rows(x: torch.Tensor):
    return [[i, *map(float, row)] for i, row in enumerate(x.tolist())]


def sample_header(d: int, prefix: str = "x") -> list:
    return ["chain_id"] + [f"{prefix}_{j + 1}" for j in range(d)]


def trajectory_rows(times, states):
    """Long-format rows ``(chain_id, t, z_1..z_d)`` from matching lists of times and ``(B, d)`` states."""
    rows = []
    for t, z in zip(times, states):
        z = z.reshape(z.shape[0], -1) if z.ndim > 1 else z.reshape(-1, 1)
        for i, row in enumerate(z.tolist()):
            rows.append([i, float(t), *row])
    rows.sort(key=lambda r: r[0])
    return rows
