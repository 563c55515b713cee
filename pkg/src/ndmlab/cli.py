"""``ndmlab`` command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import torch

from . import config as C
from .data import (
    Estimate, generate, gmm_cdf, energy_distance, ks_test_1d, nelbo_eval, normalizer_for, train_test_split,
)
from .errors import ContractError, NDMError, NumericalError
from .io import (
    config_hash, load_checkpoint, sample_header, sample_rows, save_checkpoint, trajectory_rows, write_csv,
)
from .model import NDM
from .nets import DTYPE
from .ot import MonotoneMap, OTModel, ot_flow_sample, ot_loss
from .sampling import ancestral_sample, ddim_sample, em_sample, nll_ode, ode_sample
from .train import init_state, ndm_objective, train

log = logging.getLogger("ndmlab")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
METHODS = ("ancestral", "ddim", "em-sde", "rk45-ode")
METRICS = ("nelbo", "nll-ode", "energy-distance", "ks")


# --------------------------------------------------------------------------- models from configs


def _dot_model(cfg) -> OTModel:
    return OTModel(C.build_ndm(cfg, eps=False), MonotoneMap(cfg["dot"]["hidden"]))


def _model_from_checkpoint(doc):
    if doc.get("model_kind") == "dot":
        return OTModel.from_dict(doc["net_spec"])
    return NDM.from_dict(doc["net_spec"])


# --------------------------------------------------------------------------- train


def _run_training(cfg, model, objective, kind: str, check=None) -> int:
    tcfg = C.train_config(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    data = generate(C.dataset_spec(cfg))
    x_train, _ = train_test_split(data, cfg["dataset"]["seed"])
    params = model.init_params(torch.Generator().manual_seed(tcfg.seed))
    state = init_state(params, tcfg)

    def checkpoint(st, name):
        if check is not None:
            check(st.params)
        save_checkpoint(out / name, model=model.to_dict(), params=st.params, adam=st.adam, rng_seed=tcfg.seed,
                        step=st.step, config=cfg, extra={"model_kind": kind})

    def write_log(st):
        write_csv(out / "train_log.csv", ["step", "l_prior", "l_rec", "l_diff", "total"], st.log, chash)

    checkpoint(state, "checkpoint_0.json")
    t0 = time.time()
    try:
        train(objective(model), x_train, tcfg, state=state,
              on_checkpoint=lambda st: checkpoint(st, f"checkpoint_{st.step}.json"))
    except NumericalError as exc:
        write_log(state)
        checkpoint(state, "last_good.json")
        print(f"error: numerical failure at step {state.step}: {exc}; last good checkpoint kept", file=sys.stderr)
        return EXIT_NUMERIC
    write_log(state)
    checkpoint(state, "final.json")
    print(f"trained {tcfg.iterations} steps in {time.time() - t0:.1f}s -> {out / 'final.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = C.load_config(args.config, _train_overrides(args))
    model = C.build_ndm(cfg)
    return _run_training(cfg, model, lambda m: ndm_objective(m, cfg["train"]["loss"]), "ndm")


def cmd_dot_train(args) -> int:
    cfg = C.load_config(args.config, _train_overrides(args))
    if cfg["dataset"]["kind"] != "gaussian-mixture-1d":
        raise ContractError("dot-train needs the 1-D dataset (gaussian-mixture-1d)")
    model = _dot_model(cfg)
    grid = torch.linspace(-6.0, 6.0, 2001, dtype=DTYPE)

    def monotone(params):
        theta, _ = model.split(params)
        if not bool((torch.diff(model.mono(theta, grid)) > 0).all()):
            raise NumericalError("monotone map lost monotonicity")

    return _run_training(cfg, model, lambda m: (lambda p, x, g: ot_loss(m, p, x, g)), "dot", check=monotone)


def _train_overrides(args) -> dict:
    return {
        "train.seed": args.seed, "train.iterations": args.iterations, "train.batch_size": args.batch_size,
        "train.lr": args.lr, "output_dir": args.output_dir,
    }


# --------------------------------------------------------------------------- sample


def _load(path):
    doc = load_checkpoint(path)
    return doc, _model_from_checkpoint(doc)


def _draw(model, params, method, n, steps, atol, rtol, generator):
    """Returns ``(x in normalized coordinates, times, states)``."""
    if isinstance(model, OTModel):
        if method != "rk45-ode":
            raise ContractError("restricted-OT checkpoints only support --method rk45-ode")
        eps = torch.randn(n, generator=generator, dtype=DTYPE)
        res = ot_flow_sample(model, params, eps, atol=atol, rtol=rtol, record=True)
        return res.y[:, None], res.ts, [y[:, None] for y in res.ys]
    cont = model.schedule.continuous
    if method in ("em-sde", "rk45-ode") and not cont:
        raise ContractError(f"--method {method} needs a continuous-time checkpoint")
    if method == "rk45-ode":
        z = torch.randn(n, model.data_dim, generator=generator, dtype=DTYPE)
        x, traj = ode_sample(model, params, z, atol=atol, rtol=rtol, record=True)
    elif method == "em-sde":
        x, traj = em_sample(model, params, n, generator, steps=steps or 1000)
    elif method == "ddim":
        x, traj = ddim_sample(model, params, n, generator, steps=steps or (None if not cont else 1000))
    else:
        x, traj = ancestral_sample(model, params, n, generator, steps=steps or (None if not cont else 1000))
    return x, traj.times, traj.states


def cmd_sample(args) -> int:
    doc, model = _load(args.ckpt)
    if args.n < 0:
        raise ContractError("--n must be >= 0")
    cfg = doc.get("config") or {}
    chash = doc["config_hash"]
    d = 1 if isinstance(model, OTModel) else model.data_dim
    out = Path(args.out)
    if args.n == 0:
        write_csv(out, sample_header(d), [], chash)
        if args.trajectories:
            write_csv(_traj_path(args, out), ["chain_id", "t"] + [f"z_{j + 1}" for j in range(d)], [], chash)
        return EXIT_OK
    g = torch.Generator().manual_seed(args.seed)
    x, times, states = _draw(model, doc["params"], args.method, args.n, args.steps, args.atol, args.rtol, g)
    if cfg.get("dataset"):
        x = normalizer_for(C.dataset_spec(cfg)).denormalize(x)
    write_csv(out, sample_header(d), sample_rows(x), chash)
    if args.trajectories:
        write_csv(_traj_path(args, out), ["chain_id", "t"] + [f"z_{j + 1}" for j in range(d)],
                  trajectory_rows(times, states), chash)
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def _traj_path(args, out: Path) -> Path:
    return Path(args.traj_out) if args.traj_out else out.with_name(out.stem + "_trajectories.csv")


# --------------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    doc, model = _load(args.ckpt)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ContractError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    cfg = doc.get("config")
    if not cfg:
        raise ContractError("checkpoint carries no run config; cannot rebuild its dataset")
    spec = C.dataset_spec(cfg)
    is_dot = isinstance(model, OTModel)
    if "nll-ode" in metrics and (is_dot or not model.schedule.continuous):
        raise ContractError("nll-ode needs a continuous-time NDM checkpoint")
    if "nelbo" in metrics and is_dot:
        raise ContractError("nelbo is reported by training for restricted-OT checkpoints")
    if "ks" in metrics and spec.dim != 1:
        raise ContractError("ks needs 1-D data")
    params = doc["params"]
    _, x_test = train_test_split(generate(spec), spec.seed)
    d = spec.dim
    g = torch.Generator().manual_seed(args.seed)
    rows = []
    run_id = args.run_id or cfg.get("run_id", "run")

    def add(name, est: Estimate):
        rows.append([run_id, name, est.mean, est.stderr, est.n])

    if "nelbo" in metrics:
        est = nelbo_eval(x_test, model, params, mc_samples=args.mc_samples, generator=g)
        add("nelbo", est)
        add("nelbo_bpd", est.bpd(d))
    if "nll-ode" in metrics:
        xs = x_test[: args.nll_n]
        nats, _ = nll_ode(model, params, xs, atol=args.atol, rtol=args.rtol, generator=g)
        est = Estimate(float(nats.mean()), float(nats.std() / math.sqrt(nats.shape[0])), nats.shape[0])
        add("nll", est)
        add("nll_bpd", est.bpd(d))
    if "energy-distance" in metrics or "ks" in metrics:
        method = args.method or ("rk45-ode" if is_dot else cfg["sampler"]["method"])
        xs, _, _ = _draw(model, params, method, args.n_samples, args.steps, args.atol, args.rtol, g)
        if "energy-distance" in metrics:
            ref = generate(spec, args.n_samples, seed=spec.seed + 1)
            ref2 = generate(spec, args.n_samples, seed=spec.seed + 2)
            add("energy-distance", Estimate(energy_distance(xs, ref), float("nan"), args.n_samples))
            add("energy-distance-baseline", Estimate(energy_distance(ref2, ref), float("nan"), args.n_samples))
        if "ks" in metrics:
            norm = normalizer_for(spec)
            stat, p = ks_test_1d(xs, lambda v: gmm_cdf(v, norm))
            add("ks-statistic", Estimate(stat, float("nan"), args.n_samples))
            add("ks-pvalue", Estimate(p, float("nan"), args.n_samples))
    write_csv(args.out, ["run_id", "metric", "value", "stderr", "n"], rows, doc["config_hash"])
    for r in rows:
        print(f"{r[1]:>26s} {r[2]:.6g} +- {r[3]:.3g} (n={r[4]})")
    return EXIT_OK


# --------------------------------------------------------------------------- export-transform


def parse_grid(spec: str) -> torch.Tensor:
    try:
        lo, hi, n = spec.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError as exc:
        raise ContractError(f"grid must look like 'lo:hi:n', got {spec!r}") from exc
    if n < 1 or not hi >= lo:
        raise ContractError("grid needs n >= 1 and hi >= lo")
    return torch.linspace(lo, hi, n, dtype=DTYPE)


def parse_times(spec: str) -> list[float]:
    try:
        ts = [float(v) for v in spec.split(",") if v.strip()]
    except ValueError as exc:
        raise ContractError(f"bad --times {spec!r}") from exc
    if not ts or any(not 0.0 <= t <= 1.0 for t in ts):
        raise ContractError("--times must be a comma list of values in [0, 1]")
    return ts


def export_transform_rows(model, params, axis: torch.Tensor, times) -> tuple[list, list]:
    """Evaluate ``F(x, t)`` on the Cartesian grid ``axis^d`` for each time."""
    ndm = model.ndm if isinstance(model, OTModel) else model
    _, phi = model.split(params)
    d = ndm.data_dim
    pts = torch.cartesian_prod(*([axis] * d)).reshape(-1, d)
    header = [f"x_{j + 1}" for j in range(d)] + ["t"] + [f"F_{j + 1}" for j in range(d)]
    rows = []
    with torch.no_grad():
        for t in times:
            f = ndm.transform.apply(pts, float(t), phi)
            tcol = torch.full((pts.shape[0], 1), float(t), dtype=DTYPE)
            rows.extend(torch.cat([pts, tcol, f], dim=1).tolist())
    return header, rows


def cmd_export_transform(args) -> int:
    doc, model = _load(args.ckpt)
    header, rows = export_transform_rows(model, doc["params"], parse_grid(args.grid), parse_times(args.times))
    write_csv(args.out, header, rows, doc["config_hash"])
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndmlab", description="Train, sample and evaluate neural diffusion models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, text in (("train", cmd_train, "train an NDM from a TOML config"),
                           ("dot-train", cmd_dot_train, "train the 1-D straight-trajectory model")):
        t = sub.add_parser(name, help=text)
        t.add_argument("--config", required=True)
        t.add_argument("--seed", type=int)
        t.add_argument("--iterations", type=int)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--output-dir")
        t.set_defaults(func=fn)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--method", choices=METHODS, default="ancestral")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--atol", type=float, default=1e-5)
    s.add_argument("--rtol", type=float, default=1e-5)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--trajectories", action="store_true")
    s.add_argument("--out", default="samples.csv")
    s.add_argument("--traj-out")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="compute metrics for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--metrics", default="nelbo")
    e.add_argument("--mc-samples", type=int, default=8)
    e.add_argument("--nll-n", type=int, default=500)
    e.add_argument("--n-samples", type=int, default=2000)
    e.add_argument("--method", choices=METHODS)
    e.add_argument("--steps", type=int)
    e.add_argument("--atol", type=float, default=1e-5)
    e.add_argument("--rtol", type=float, default=1e-5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--run-id")
    e.add_argument("--out", default="metrics.csv")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-transform", help="evaluate F(x, t) on a grid")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--grid", default="-3:3:100")
    x.add_argument("--times", default="0,0.25,0.5,0.75,1")
    x.add_argument("--out", default="transform.csv")
    x.set_defaults(func=cmd_export_transform)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NDMError as exc:  # pragma: no cover - every subclass is handled above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
