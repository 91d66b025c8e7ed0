"""Experiment harness: configuration, single runs, hyperparameter grids, the
conjugate-posterior oracle and checkpoint re-evaluation.

Every artifact except ``timing.json`` is a deterministic function of the
resolved configuration, so repeated runs can be compared byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import multiprocessing
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .data import LabeledDataset, load_idx, make_conjugate_problem, split
from .evaluate import EnsembleAccumulator, batch_means_stderr, evaluate
from .net import CATEGORICAL, Architecture, Network
from .params import load_checkpoint, save_checkpoint
from .precond import BATCH_MODES, FISHER_VARIANTS, KINDS, constant_decay, inv_sqrt_decay, make_preconditioner
from .priors import GaussianPrior, make_prior
from .sgld import TRACE_COLUMNS, Chain, ConstantHalving, DivergenceError, Polynomial, SamplerConfig, run_chain, sgld_step

WORKERS_ENV = "NATLANGEVIN_WORKERS"
SUMMARY_SCHEMA = 1
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

EUCLIDEAN_ETAS = (0.001, 0.01, 0.1, 1.0)
PRECONDITIONED_ETAS = (0.0001, 0.001, 0.01, 0.1)
PRIOR_VARS = (0.01, 0.1, 1.0)

RESULT_COLUMNS = (
    "preconditioner", "mode", "nll_train", "acc_train", "nll_test", "acc_test",
    "nll_val", "acc_val", "eta0", "prior_var", "seed", "members", "status",
)
ORACLE_COLUMNS = (
    "preconditioner", "coord", "post_mean", "sample_mean", "mc_stderr", "z",
    "post_var", "sample_var", "var_rel_err", "mean_ok", "var_ok",
)

IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class RunConfig:
    # network and data
    hidden: list = field(default_factory=lambda: [400, 400])
    data_dir: Optional[str] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    val_size: int = 10_000
    train_size: Optional[int] = None
    train_eval_size: Optional[int] = 10_000
    # preconditioner
    preconditioner: str = "qdop"
    eps: float = 1e-4
    gamma: Any = "inv_sqrt"
    fisher_variant: str = "op"
    fisher_batch: str = "mean_outer"
    backend: Optional[str] = None
    # prior
    prior: str = "gaussian"
    prior_var: float = 1.0
    nig_alpha: float = 1.0
    nig_beta: float = 1.0
    # sampler
    schedule: str = "halving"
    eta0: float = 0.01
    halve_every: int = 10_000
    poly_exponent: float = -1.0 / 3.0
    batch_size: int = 100
    updates: int = 50_000
    burn_in: int = 500
    thin: int = 100
    mean_mode: str = "post_burn_in"
    eval_every: int = 1000
    adapt_until: Optional[int] = None
    seed: int = 0
    data_seed: int = 1
    # grid
    preconditioners: list = field(default_factory=lambda: ["identity", "qdop"])
    eta_grid: Optional[list] = None
    prior_var_grid: list = field(default_factory=lambda: list(PRIOR_VARS))
    # conjugate oracle
    oracle_n: int = 50
    oracle_d: int = 2
    oracle_noise_var: float = 2.0
    oracle_prior_var: float = 1.0
    oracle_seed: int = 0
    oracle_eta: Optional[float] = None
    oracle_burn_in: int = 10_000
    oracle_steps: int = 200_000
    oracle_kinds: list = field(default_factory=lambda: list(KINDS))
    # outputs
    output_dir: str = "runs/default"
    save_snapshots: bool = False

    def etas_for(self, kind: str) -> list:
        if self.eta_grid is not None:
            return list(self.eta_grid)
        return list(EUCLIDEAN_ETAS if kind == "identity" else PRECONDITIONED_ETAS)

    def architecture(self, n_in: int, n_out: int) -> Architecture:
        return Architecture((n_in, *self.hidden, n_out), CATEGORICAL)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


def _int_like(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def validate(cfg: RunConfig) -> RunConfig:
    """Range-check every key; raises ConfigError naming the first offender."""
    _check(isinstance(cfg.hidden, list) and all(_int_like(h) and h >= 1 for h in cfg.hidden), "hidden",
           "must be a list of positive integers")
    for key in ("val_size", "batch_size", "thin", "halve_every", "updates", "burn_in", "eval_every",
                "oracle_n", "oracle_d", "oracle_burn_in", "oracle_steps", "seed", "data_seed", "oracle_seed"):
        value = getattr(cfg, key)
        _check(_int_like(value) and value >= 0, key, f"must be a non-negative integer, got {value!r}")
    for key in ("val_size", "batch_size", "thin", "oracle_n", "oracle_steps"):
        _check(getattr(cfg, key) >= 1, key, "must be >= 1")
    _check(cfg.oracle_d >= 2, "oracle_d", "needs the intercept plus at least one slope (>= 2)")
    for key in ("train_size", "train_eval_size", "adapt_until"):
        value = getattr(cfg, key)
        _check(value is None or (_int_like(value) and value >= 1), key, f"must be null or a positive integer, got {value!r}")
    _check(cfg.preconditioner in KINDS, "preconditioner", f"must be one of {KINDS}")
    _check(isinstance(cfg.preconditioners, list) and cfg.preconditioners
           and all(k in KINDS for k in cfg.preconditioners), "preconditioners", f"entries must be in {KINDS}")
    _check(isinstance(cfg.oracle_kinds, list) and all(k in KINDS for k in cfg.oracle_kinds), "oracle_kinds",
           f"entries must be in {KINDS}")
    _check(isinstance(cfg.eps, (int, float)) and cfg.eps >= 0 and math.isfinite(cfg.eps), "eps", "must be >= 0")
    _check(cfg.gamma == "inv_sqrt" or (isinstance(cfg.gamma, (int, float)) and 0 < cfg.gamma <= 1), "gamma",
           "must be 'inv_sqrt' or a number in (0, 1]")
    _check(cfg.fisher_variant in FISHER_VARIANTS, "fisher_variant", f"must be one of {FISHER_VARIANTS}")
    _check(cfg.fisher_batch in BATCH_MODES, "fisher_batch", f"must be one of {BATCH_MODES}")
    _check(cfg.backend in (None, "cython", "numpy"), "backend", "must be null, 'cython' or 'numpy'")
    _check(cfg.prior in ("gaussian", "nig", "none"), "prior", "must be 'gaussian', 'nig' or 'none'")
    for key in ("prior_var", "nig_alpha", "nig_beta", "oracle_noise_var", "oracle_prior_var"):
        value = getattr(cfg, key)
        _check(isinstance(value, (int, float)) and value > 0, key, f"must be > 0, got {value!r}")
    _check(cfg.schedule in ("halving", "polynomial"), "schedule", "must be 'halving' or 'polynomial'")
    _check(isinstance(cfg.eta0, (int, float)) and cfg.eta0 > 0, "eta0", "must be > 0")
    _check(cfg.oracle_eta is None or cfg.oracle_eta > 0, "oracle_eta", "must be null or > 0")
    _check(cfg.poly_exponent <= 0, "poly_exponent", "must be <= 0")
    _check(cfg.mean_mode in ("post_burn_in", "all"), "mean_mode", "must be 'post_burn_in' or 'all'")
    _check(cfg.eta_grid is None or (isinstance(cfg.eta_grid, list) and cfg.eta_grid
           and all(isinstance(e, (int, float)) and e > 0 for e in cfg.eta_grid)), "eta_grid",
           "must be null or a list of positive numbers")
    _check(isinstance(cfg.prior_var_grid, list) and cfg.prior_var_grid
           and all(isinstance(v, (int, float)) and v > 0 for v in cfg.prior_var_grid), "prior_var_grid",
           "must be a non-empty list of positive numbers")
    for key in IDX_NAMES:
        value = getattr(cfg, key)
        _check(value is None or Path(value).is_file(), key, f"file not found: {value}")
    _check(cfg.data_dir is None or Path(cfg.data_dir).is_dir(), "data_dir", f"directory not found: {cfg.data_dir}")
    _check(isinstance(cfg.output_dir, str) and cfg.output_dir != "", "output_dir", "must be a path")
    return cfg


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in raw:
        if key not in FIELDS:
            raise ConfigError(key, "unknown key")
    return validate(RunConfig(**raw))


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<file>", f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text() or "{}")
    except json.JSONDecodeError as err:
        raise ConfigError("<file>", f"invalid JSON: {err}") from None
    return from_dict(raw)


def echo_config(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- data

def _idx_path(cfg: RunConfig, key: str) -> Path:
    explicit = getattr(cfg, key)
    if explicit is not None:
        return Path(explicit)
    if cfg.data_dir is None:
        raise ConfigError(key, "no dataset path (set it or data_dir)")
    base = Path(cfg.data_dir)
    stem = IDX_NAMES[key]
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (base / name).is_file():
            return base / name
    raise ConfigError(key, f"{stem} not found under {base}")


@dataclass
class Datasets:
    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset
    train_eval: LabeledDataset


def load_datasets(cfg: RunConfig) -> Datasets:
    full = load_idx(_idx_path(cfg, "train_images"), _idx_path(cfg, "train_labels"), "train")
    test = load_idx(_idx_path(cfg, "test_images"), _idx_path(cfg, "test_labels"), "test")
    if cfg.val_size >= len(full):
        raise ConfigError("val_size", f"must be below the training-set size {len(full)}")
    train, val = split(full, cfg.val_size, cfg.data_seed)
    rng = np.random.default_rng([cfg.data_seed, 7])
    if cfg.train_size is not None and cfg.train_size < len(train):
        train = train.subset(np.sort(rng.permutation(len(train))[: cfg.train_size]), "train")
    train_eval = train
    if cfg.train_eval_size is not None and cfg.train_eval_size < len(train):
        train_eval = train.subset(np.sort(rng.permutation(len(train))[: cfg.train_eval_size]), "train")
    return Datasets(train, val, test, train_eval)


# ---------------------------------------------------------------- runs

def _decay(cfg: RunConfig):
    return inv_sqrt_decay if cfg.gamma == "inv_sqrt" else constant_decay(float(cfg.gamma))


def _schedule(cfg: RunConfig, eta0: float):
    if cfg.schedule == "polynomial":
        return Polynomial(eta0, cfg.poly_exponent)
    return ConstantHalving(eta0, cfg.halve_every)


def _prior(cfg: RunConfig, prior_var: float):
    return make_prior(cfg.prior, var=prior_var, alpha=cfg.nig_alpha, beta=cfg.nig_beta)


def cell_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class CellSpec:
    index: int
    preconditioner: str
    eta0: float
    prior_var: float
    seed: int

    @property
    def name(self) -> str:
        return f"{self.index:03d}_{self.preconditioner}_eta{self.eta0:g}_pv{self.prior_var:g}"


def run_cell(cfg: RunConfig, data: Datasets, spec: CellSpec, out_dir: Optional[Path] = None) -> dict:
    """One chain: train, then score the ensemble and the posterior mean on every split.

    Returns a plain dict (picklable, JSON-ready). Divergence is recorded, not raised.
    """
    arch = cfg.architecture(data.train.inputs.shape[1], int(data.train.targets.max()) + 1)
    model = Network(arch)
    precond = make_preconditioner(spec.preconditioner, arch.layout(), cfg.eps, _decay(cfg),
                                  cfg.fisher_variant, cfg.fisher_batch, cfg.backend)
    sampler = SamplerConfig(
        schedule=_schedule(cfg, spec.eta0), updates=cfg.updates, batch_size=cfg.batch_size,
        burn_in=cfg.burn_in, thin=cfg.thin, mean_mode=cfg.mean_mode, eval_every=cfg.eval_every,
        seed=spec.seed, data_seed=cfg.data_seed, adapt_until=cfg.adapt_until, keep_snapshots=False,
    )
    splits = {"train": data.train_eval, "val": data.validation, "test": data.test}
    acc = EnsembleAccumulator(model, splits)
    snap_dir = None
    if out_dir is not None and cfg.save_snapshots:
        snap_dir = out_dir / "snapshots"
        snap_dir.mkdir(parents=True, exist_ok=True)

    def on_snapshot(theta):
        acc.add(theta)
        if snap_dir is not None:
            save_checkpoint(snap_dir / f"{acc.count:05d}.lbnn", theta)

    record = {"cell": spec.name, "preconditioner": spec.preconditioner, "eta0": spec.eta0,
              "prior_var": spec.prior_var, "seed": spec.seed, "status": "ok"}
    try:
        result = run_chain(sampler, model, data.train, precond, _prior(cfg, spec.prior_var),
                           validation=data.validation, on_snapshot=on_snapshot)
    except DivergenceError as err:
        record.update(status=f"diverged at step {err.step}", trace=err.trace, members=acc.count)
        return record
    if acc.count == 0:
        # no snapshot after burn-in (e.g. zero updates): the current parameters are the ensemble
        acc.add(result.chain.theta)
    record["trace"] = result.trace
    record["members"] = acc.count
    for name in splits:
        ens = acc.metrics(name)
        post = evaluate(model, result.theta_mean, splits[name])
        record[f"ensemble_{name}"] = dataclasses.asdict(ens)
        record[f"post_mean_{name}"] = dataclasses.asdict(post)
        record[f"member_nll_{name}"] = acc.mean_member_nll(name)
        record[f"jensen_{name}"] = bool(ens.nll <= acc.mean_member_nll(name) + 1e-12)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "theta_mean.lbnn", result.theta_mean)
        save_checkpoint(out_dir / "theta_final.lbnn", result.chain.theta)
    return record


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def result_rows(record: dict) -> list[dict]:
    rows = []
    for mode in ("ensemble", "post_mean"):
        row = {k: record[k] for k in ("preconditioner", "eta0", "prior_var", "seed", "status")}
        row["mode"] = mode
        row["members"] = record.get("members", 0) if mode == "ensemble" else 1
        for split_name, suffix in (("train", "train"), ("test", "test"), ("val", "val")):
            metrics = record.get(f"{mode}_{split_name}", {"nll": float("nan"), "accuracy": float("nan")})
            row[f"nll_{suffix}"] = metrics["nll"]
            row[f"acc_{suffix}"] = metrics["accuracy"]
        rows.append(row)
    return rows


def _strip(record: dict) -> dict:
    return {k: v for k, v in record.items() if k != "trace"}


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_summary(path: Path, cfg: RunConfig, command: str, cells: list[dict], selected: list[dict]) -> None:
    summary = {
        "schema": SUMMARY_SCHEMA,
        "version": __version__,
        "command": command,
        "config": cfg.to_dict(),
        "selected": selected,
        "cells": [_strip(c) for c in cells],
    }
    path.write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")


def write_cell_outputs(out_dir: Path, record: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "metrics.csv", TRACE_COLUMNS, record.get("trace", []))


def select_best(records: list[dict]) -> list[dict]:
    """Best cell per (preconditioner, mode) by validation accuracy; ties keep the earliest cell."""
    chosen = []
    kinds = list(dict.fromkeys(r["preconditioner"] for r in records))
    for kind in kinds:
        for mode in ("ensemble", "post_mean"):
            best = None
            for rec in records:
                if rec["preconditioner"] != kind or rec["status"] != "ok":
                    continue
                score = rec[f"{mode}_val"]["accuracy"]
                if best is None or score > best[0]:
                    best = (score, rec)
            if best is None:
                first = next(r for r in records if r["preconditioner"] == kind)
                row = [r for r in result_rows(first) if r["mode"] == mode][0]
                row["status"] = "all cells diverged"
            else:
                row = [r for r in result_rows(best[1]) if r["mode"] == mode][0]
                row["cell"] = best[1]["cell"]
            chosen.append(row)
    return chosen


# fork-inherited state for grid workers
_WORKER_STATE: dict = {}


def _grid_worker(spec: CellSpec) -> dict:
    cfg, data, out_dir = _WORKER_STATE["cfg"], _WORKER_STATE["data"], _WORKER_STATE["out_dir"]
    cell_dir = out_dir / "cells" / spec.name
    start = time.perf_counter()
    record = run_cell(cfg, data, spec, cell_dir)
    write_cell_outputs(cell_dir, record)
    return record | {"_wall": time.perf_counter() - start}


def grid_cells(cfg: RunConfig) -> list[CellSpec]:
    cells = []
    for kind in cfg.preconditioners:
        for eta in cfg.etas_for(kind):
            for pv in cfg.prior_var_grid:
                i = len(cells)
                cells.append(CellSpec(i, kind, float(eta), float(pv), cell_seed(cfg.seed, i)))
    return cells


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(WORKERS_ENV, f"must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(WORKERS_ENV, "must be >= 1")
    return n


def run_grid(cfg: RunConfig, data: Optional[Datasets] = None, workers: Optional[int] = None) -> tuple[list, list]:
    out_dir = Path(cfg.output_dir)
    echo_config(cfg, out_dir)
    data = data or load_datasets(cfg)
    specs = grid_cells(cfg)
    workers = workers or worker_count()
    _WORKER_STATE.update(cfg=cfg, data=data, out_dir=out_dir)
    try:
        if workers > 1 and len(specs) > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(min(workers, len(specs)), mp_context=ctx) as pool:
                records = list(pool.map(_grid_worker, specs))
        else:
            records = [_grid_worker(s) for s in specs]
    finally:
        _WORKER_STATE.clear()
    timing = {r["cell"]: r.pop("_wall") for r in records}
    selected = select_best(records)
    rows = [row | {"cell": r["cell"]} for r in records for row in result_rows(r)]
    write_csv(out_dir / "cells.csv", ("cell",) + RESULT_COLUMNS, rows)
    write_csv(out_dir / "results.csv", RESULT_COLUMNS + ("cell",), selected)
    write_summary(out_dir / "summary.json", cfg, "grid", records, selected)
    (out_dir / "timing.json").write_text(json.dumps({"cells": timing}, indent=2, sort_keys=True) + "\n")
    return records, selected


def run_train(cfg: RunConfig, data: Optional[Datasets] = None) -> dict:
    out_dir = Path(cfg.output_dir)
    echo_config(cfg, out_dir)
    data = data or load_datasets(cfg)
    spec = CellSpec(0, cfg.preconditioner, cfg.eta0, cfg.prior_var, cfg.seed)
    start = time.perf_counter()
    record = run_cell(cfg, data, spec, out_dir)
    wall = time.perf_counter() - start
    write_cell_outputs(out_dir, record)
    write_csv(out_dir / "results.csv", RESULT_COLUMNS, result_rows(record))
    write_summary(out_dir / "summary.json", cfg, "train", [record], [])
    (out_dir / "timing.json").write_text(json.dumps({"wall_seconds": wall}, indent=2) + "\n")
    return record


def run_oracle(cfg: RunConfig) -> list[dict]:
    """Full-batch chains on a conjugate linear-Gaussian problem versus its exact posterior.

    The design's first column is the intercept, carried by the linear network's bias.
    """
    out_dir = Path(cfg.output_dir)
    echo_config(cfg, out_dir)
    problem = make_conjugate_problem(cfg.oracle_n, cfg.oracle_d, cfg.oracle_noise_var, cfg.oracle_prior_var,
                                     seed=cfg.oracle_seed, intercept=True)
    problem.save(out_dir / "problem.npz")
    data = problem.as_dataset()
    n = problem.n
    model = Network(Architecture((problem.d - 1, 1), "gaussian", math.sqrt(problem.noise_var)))
    prior = GaussianPrior(var=problem.prior_var)
    eta = cfg.oracle_eta if cfg.oracle_eta is not None else 1e-3 * n / 2
    post_var = np.diag(problem.post_cov)
    rows = []
    for kind in cfg.oracle_kinds:
        precond = make_preconditioner(kind, model.layout, cfg.eps, _decay(cfg), cfg.fisher_variant,
                                      cfg.fisher_batch, cfg.backend)
        sampler = SamplerConfig(schedule=ConstantHalving(eta, 0), updates=cfg.oracle_burn_in + cfg.oracle_steps,
                                batch_size=n, burn_in=cfg.oracle_burn_in, thin=1,
                                adapt_until=cfg.oracle_burn_in, keep_snapshots=False)
        chain = Chain.start(model.init_params(np.random.default_rng([cfg.oracle_seed, 0])), cfg.oracle_seed)
        draws = np.empty((cfg.oracle_steps, problem.d))
        batch = (data.inputs, data.targets)
        for i in range(sampler.updates):
            sgld_step(chain, precond, model, prior, batch, n, sampler)
            if i >= cfg.oracle_burn_in:
                draws[i - cfg.oracle_burn_in] = chain.theta.values
        mean = draws.mean(axis=0)
        var = draws.var(axis=0, ddof=1)
        se = batch_means_stderr(draws, 50)
        for j in range(problem.d):
            z = (mean[j] - problem.post_mean[j]) / se[j]
            rel = var[j] / post_var[j] - 1.0
            rows.append({
                "preconditioner": kind, "coord": j, "post_mean": float(problem.post_mean[j]),
                "sample_mean": float(mean[j]), "mc_stderr": float(se[j]), "z": float(z),
                "post_var": float(post_var[j]), "sample_var": float(var[j]), "var_rel_err": float(rel),
                "mean_ok": bool(abs(z) <= 3.0), "var_ok": bool(abs(rel) <= 0.10),
            })
    write_csv(out_dir / "oracle.csv", ORACLE_COLUMNS, rows)
    return rows


def run_eval(cfg: RunConfig, checkpoints: list[Path], data: Optional[Datasets] = None) -> list[dict]:
    """Score a checkpoint (posterior mean) or several (an ensemble) on every split."""
    data = data or load_datasets(cfg)
    thetas = [load_checkpoint(p) for p in checkpoints]
    arch = cfg.architecture(data.train.inputs.shape[1], int(data.train.targets.max()) + 1)
    if thetas[0].layout != arch.layout():
        raise ConfigError("hidden", "checkpoint layout does not match the configured architecture")
    model = Network(arch)
    splits = {"train": data.train_eval, "val": data.validation, "test": data.test}
    acc = EnsembleAccumulator(model, splits)
    for theta in thetas:
        acc.add(theta)
    rows = []
    for name in splits:
        m = acc.metrics(name)
        rows.append({"split": name, "members": acc.count, "nll": m.nll, "accuracy": m.accuracy,
                     "mean_member_nll": acc.mean_member_nll(name)})
    return rows


# ---------------------------------------------------------------- command line

def _coerce(name: str, text: str):
    default = FIELDS[name].default
    if FIELDS[name].default_factory is not dataclasses.MISSING or name == "eta_grid":
        items = [s for s in text.split(",") if s]
        if name in ("preconditioners", "oracle_kinds"):
            return items
        if name == "hidden":
            return [int(s) for s in items]
        return [float(s) for s in items]
    if text.lower() in ("null", "none"):
        return None
    if name == "gamma":
        return text if text == "inv_sqrt" else float(text)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int) or name in ("train_size", "train_eval_size", "adapt_until"):
        return int(text)
    if isinstance(default, float) or name == "oracle_eta":
        return float(text)
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="natlangevin", description="Preconditioned SGLD for feedforward nets.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "single chain with the configured preconditioner, step size and prior",
        "grid": "step-size x prior-variance grid per preconditioner, selected on validation accuracy",
        "oracle": "compare sampled moments against an exact conjugate posterior",
        "eval": "re-evaluate checkpoints (one = single model, several = ensemble)",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="JSON file of RunConfig keys; flags override it")
        for key in FIELDS:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="VALUE", default=None)
        if name == "eval":
            p.add_argument("checkpoints", nargs="+", type=Path)
    return parser


def resolve(args) -> RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("<file>", f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text() or "{}")
        except json.JSONDecodeError as err:
            raise ConfigError("<file>", f"invalid JSON: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
    for key in FIELDS:
        text = getattr(args, key)
        if text is not None:
            try:
                raw[key] = _coerce(key, text)
            except ValueError:
                raise ConfigError(key, f"cannot parse {text!r}") from None
    return from_dict(raw)


def _table(rows, columns) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)
    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        if args.command == "train":
            record = run_train(cfg)
            print(_table(result_rows(record), RESULT_COLUMNS[:8] + ("members", "status")))
            return EXIT_OK if record["status"] == "ok" else EXIT_DIVERGED
        if args.command == "grid":
            records, selected = run_grid(cfg)
            print(_table(selected, RESULT_COLUMNS[:6] + ("eta0", "prior_var", "status")))
            return EXIT_OK if any(r["status"] == "ok" for r in records) else EXIT_DIVERGED
        if args.command == "oracle":
            rows = run_oracle(cfg)
            print(_table(rows, ORACLE_COLUMNS))
            return EXIT_OK
        rows = run_eval(cfg, args.checkpoints)
        print(_table(rows, ("split", "members", "nll", "accuracy", "mean_member_nll")))
        return EXIT_OK
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
