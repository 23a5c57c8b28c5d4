"""Command line entry point: ``generate``, ``train``, ``sweep`` and ``diagnose``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import diagnostics
from .batcher import plan_epoch
from .config import ConfigError, load_config
from .datagen import GrfSpec, SolverError, build_dataset, synthetic1d_dataset
from .mlmc import make_schedule, mlmc_loss
from .model import ModelConfig, SpectralOperator
from .multires import build_hierarchy
from .optim import NonFiniteError, OptimizerConfig, OptimizerState, epoch_seed, train, train_test_split
from .storage import load_checkpoint, load_dataset, save_checkpoint, save_dataset

log = logging.getLogger("mlmc_neuralop")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """A missing or unreadable input file."""


def _resolve_path(out: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else out / p


def _dataset_path(cfg, out: Path) -> Path:
    return _resolve_path(out, cfg["dataset"]["path"])


def _checkpoint_path(cfg, out: Path) -> Path:
    return _resolve_path(out, cfg["run"]["checkpoint"] or "checkpoint.bin")


def _open_dataset(cfg, out: Path):
    path = _dataset_path(cfg, out)
    if not path.exists():
        raise InputError(f"dataset not found: {path} (run 'generate' first)")
    return load_dataset(path)


def _model_config(cfg, dim: int) -> ModelConfig:
    return ModelConfig(dim=dim, **cfg["model"])


def _optimizer_config(cfg) -> OptimizerConfig:
    return OptimizerConfig(**cfg["optimizer"])


def _schedule(cfg, dataset, m=None, delta=None, b_m=None, n_total=None, allocation=None, sampling=None):
    sc = cfg["schedule"]
    m = m or sc["levels"] or dataset.m
    if m > dataset.m:
        raise ConfigError(f"schedule uses {m} levels, dataset has {dataset.m}")
    levels = list(dataset.hierarchy[dataset.m - m :])
    n_train = train_test_split(dataset.n_samples)[0].size
    return make_schedule(
        levels,
        n_total or sc["n_total"] or n_train,
        sc["delta"] if delta is None else delta,
        b_m or sc["b_m"],
        allocation or sc["allocation"],
        sampling or sc["sampling"],
        sc["k"],
        sc["d"] or dataset.dim,
        sc["prescribed"],
    )


def cmd_generate(cfg, out: Path, args) -> int:
    dc = cfg["dataset"]
    hierarchy = build_hierarchy(dc["fine_resolution"], dc["levels"])
    t0 = time.perf_counter()
    if dc["kind"] == "darcy":
        spec = GrfSpec(hierarchy[-1], dc["shift"], dc["exponent"], dc["seed"])
        ds = build_dataset(dc["n"], hierarchy, spec, dc["tol"], dc["seed"])
    else:
        ds = synthetic1d_dataset(dc["n"], hierarchy, dc["seed"])
    elapsed = time.perf_counter() - t0
    path = _dataset_path(cfg, out)
    save_dataset(ds, path)
    for lvl, x in zip(ds.hierarchy, ds.inputs):
        print(f"level {lvl.index}: R={lvl.points_per_side} shape={x.shape}")
    print(f"wrote {path} ({elapsed:.2f}s)")
    return EXIT_OK


def _checkpoint_header(model_cfg, opt_cfg, state, epoch, cfg, schedule):
    return {
        "model": model_cfg.to_dict(),
        "optimizer": asdict(opt_cfg),
        "step_count": state.step_count,
        "epoch": epoch,
        "seed": cfg["run"]["seed"],
        "schedule": schedule.to_dict(),
    }


def _read_checkpoint(path: Path):
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_train(cfg, out: Path, args) -> int:
    ds = _open_dataset(cfg, out)
    schedule = _schedule(cfg, ds)
    opt_cfg = _optimizer_config(cfg)
    ckpt = _checkpoint_path(cfg, out)
    params = state = None
    start = 0
    if cfg["run"]["resume"]:
        params, header, moments = _read_checkpoint(ckpt)
        model_cfg = ModelConfig.from_dict(header["model"])
        m, v = moments if moments is not None else (None, None)
        state = OptimizerState(opt_cfg, header["step_count"], m, v)
        if opt_cfg.kind == "adam" and m is None:
            state = OptimizerState(opt_cfg, header["step_count"], np.zeros(params.size), np.zeros(params.size))
        start = header["epoch"]
    else:
        model_cfg = _model_config(cfg, ds.dim)
    model = SpectralOperator(model_cfg)
    print(f"schedule: R={schedule.resolutions} N={schedule.sample_counts} B={schedule.batch_sizes}")
    report = train(model, ds, schedule, opt_cfg, cfg["run"]["epochs"], cfg["run"]["seed"],
                   params=params, state=state, workers=args.workers, start_epoch=start)
    report.to_csv(out / "train.csv")
    epoch = start + len(report.epochs)
    moments = (report.state.m, report.state.v) if report.state.m is not None else None
    save_checkpoint(ckpt, report.params,
                    _checkpoint_header(model_cfg, opt_cfg, report.state, epoch, cfg, schedule), moments)
    print(f"epochs {start + 1}..{epoch}: final test loss {report.final_test_loss:.6e}, "
          f"steps {report.state.step_count}")
    print(f"wrote {out / 'train.csv'} and {ckpt}")
    return EXIT_OK


def sweep_runs(cfg, dataset) -> list[dict]:
    """The sweep grid: MLMC runs over (m, delta) then one baseline per resolution."""
    run = cfg["run"]
    m_values = sorted({int(m) for m in run["sweep_levels"]})
    if not m_values or m_values[-1] > dataset.m or m_values[0] < 1:
        raise ConfigError(f"run.sweep_levels {run['sweep_levels']} incompatible with {dataset.m} dataset levels")
    runs = []
    for m in m_values:
        for delta in run["sweep_deltas"]:
            runs.append({"kind": "mlmc", "m": m, "delta": float(delta),
                         "schedule": _schedule(cfg, dataset, m=m, delta=float(delta))})
    n_train = train_test_split(dataset.n_samples)[0].size
    for lvl in dataset.hierarchy[dataset.m - m_values[-1] :]:
        sched = make_schedule([lvl], n_train, 1.0, run["baseline_batch"], d=dataset.dim)
        runs.append({"kind": "baseline", "m": 1, "delta": 1.0, "schedule": sched, "resolution": lvl.points_per_side})
    for k, r in enumerate(runs):
        r["run_id"] = k
    return runs


def _run_one(r, cfg, dataset, model_cfg, opt_cfg, workers):
    model = SpectralOperator(model_cfg)
    rep = train(model, dataset, r["schedule"], opt_cfg, cfg["run"]["epochs"], cfg["run"]["seed"], workers=workers)
    return rep


PARETO_FIELDS = ["run_id", "kind", "m", "delta", "strategy", "mean_epoch_wall_s", "final_test_loss", "params_seed"]


def cmd_sweep(cfg, out: Path, args) -> int:
    ds = _open_dataset(cfg, out)
    model_cfg = _model_config(cfg, ds.dim)
    opt_cfg = _optimizer_config(cfg)
    runs = sweep_runs(cfg, ds)
    parallel = cfg["run"]["parallel"] and not args.deterministic
    if parallel:
        print("warning: parallel sweep, timing columns are unreliable", file=sys.stderr)
        with ThreadPoolExecutor(args.threads) as pool:
            reports = list(pool.map(lambda r: _run_one(r, cfg, ds, model_cfg, opt_cfg, 1), runs))
    else:
        reports = [_run_one(r, cfg, ds, model_cfg, opt_cfg, args.workers) for r in runs]
    path = out / "pareto.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARETO_FIELDS)
        for r, rep in zip(runs, reports):
            s = r["schedule"]
            strategy = f"{s.allocation}/{s.sampling}" if r["kind"] == "mlmc" else f"R={r['resolution']}"
            w.writerow([r["run_id"], r["kind"], r["m"], repr(r["delta"]), strategy,
                        repr(rep.epoch_time()), repr(rep.final_test_loss), cfg["run"]["seed"]])
            print(f"run {r['run_id']}: {r['kind']} m={r['m']} delta={r['delta']} "
                  f"epoch {rep.epoch_time():.3f}s test {rep.final_test_loss:.4e}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_diagnose(cfg, out: Path, args) -> int:
    params, header, _ = _read_checkpoint(_checkpoint_path(cfg, out))
    ds = _open_dataset(cfg, out)
    model = SpectralOperator(ModelConfig.from_dict(header["model"]))
    if params.size != model.n_params:
        raise InputError("checkpoint does not match its model configuration")
    schedule = _schedule(cfg, ds)
    run = cfg["run"]
    train_idx = train_test_split(ds.n_samples)[0]

    profile = diagnostics.variance_decay_profile(model, params, ds, run["n_probe"], train_idx)
    diagnostics.write_variance_csv(profile, out / "variance_profile.csv")

    plan = plan_epoch(schedule, epoch_seed(run["seed"], 0))
    rows, audits = [], []
    for batch in plan.batches[: run["diagnose_batches"]]:
        mapped = [train_idx[np.asarray(s)] for s in batch]
        if schedule.sampling == "nested":
            rows.append(diagnostics.gradient_comparison(model, params, ds, mapped, schedule))
        else:
            same = [mapped[0]] * schedule.m
            rows.append(diagnostics.gradient_comparison(model, params, ds, same, schedule))
        report = mlmc_loss(model, params, ds, mapped, schedule)
        audit = diagnostics.telescoping_audit(model, params, ds, mapped[0], schedule.m)
        audits.append((audit, report))
    diagnostics.write_grad_compare_csv(rows, out / "grad_compare.csv")

    n_pairs = schedule.m - 1
    with open(out / "telescoping.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "audit", "mlmc_total", "coarse_term"] + [f"pair_term_{i + 2}" for i in range(n_pairs)])
        for k, (audit, rep) in enumerate(audits):
            w.writerow([k, repr(audit), repr(rep.total), repr(rep.coarse_term), *map(repr, rep.pair_terms)])
    worst = max((a for a, _ in audits), default=0.0)
    slope = "absent" if profile.slope is None else f"{profile.slope:.3f}"
    print(f"variance slope {slope}; max telescoping audit {worst:.3e}")
    print(f"wrote variance_profile.csv, grad_compare.csv, telescoping.csv to {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sweep": cmd_sweep, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlmc-neuralop", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--deterministic", action="store_true",
                   help="sequential evaluation with a fixed reduction order")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for per-level gradient segments and parallel sweeps")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    args.workers = 1 if args.deterministic else args.threads
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except (NonFiniteError, SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InputError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
