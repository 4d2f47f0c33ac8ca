"""Experiment orchestration: seeded runs, sweeps, max-rho search,
leave-one-domain-out, and trace serialization.

Every run is a pure function of (config, seed): datasets, initial
parameters, batch composition, and evaluation batches each come from their
own counter-based stream, so re-running writes byte-identical files and
concurrent sweep cells cannot perturb each other.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig, ProblemConfig, with_optimizer
from .diagnostics import (
    EpochSummary,
    TrainingTrace,
    estimate_sharpness_ascent,
    estimate_sharpness_gradvar,
    heldout_domain_eval,
)
from .objective import PerturbationSpec, domain_variance
from .optimizers import (
    MODE_DISAM,
    MODE_ERM,
    MODE_INTUITIVE,
    MODE_SAM,
    DivergenceError,
    OptimizerState,
    make_step_fn,
)
from .problems import (
    SoftmaxMLP,
    generate_shifted_clusters,
    random_quadratic_domains,
)
from .rng import STREAM_BATCHES, STREAM_EVAL_BATCHES, STREAM_INIT, philox

GRADVAR_BATCHES = 8
PERTURBED_MODES = (MODE_SAM, MODE_DISAM, MODE_INTUITIVE)
FLAG_MONOTONICITY = "MONOTONICITY_UNVERIFIED"


def build_problem(pcfg: ProblemConfig):
    """Instantiate the configured problem; returns (problem, dataset or None)."""
    if pcfg.kind == "clusters":
        dataset = generate_shifted_clusters(
            seed=pcfg.dataset_seed,
            M=pcfg.num_domains,
            C=pcfg.num_classes,
            d_in=pcfg.d_in,
            per_domain_counts=pcfg.per_domain_counts,
            shift_scale=pcfg.shift_scale,
            difficulty_skew=pcfg.difficulty_skew,
        )
        model = SoftmaxMLP(d_in=pcfg.d_in, hidden=pcfg.hidden, n_classes=pcfg.num_classes)
        return model, dataset
    problem = random_quadratic_domains(
        seed=pcfg.dataset_seed, num_domains=pcfg.num_domains, dim=pcfg.quad_dim
    )
    return problem, None


def _group_batch(dataset, train_domains, pool_dom, pool_idx, sel):
    batch = {}
    for d in train_domains:
        mask = pool_dom[sel] == d
        if mask.any():
            idx = np.sort(pool_idx[sel[mask]])
            batch[d] = dataset.take(d, idx)
    return batch


def run_seed(config: ExperimentConfig, seed: int, epoch_summaries: bool = True) -> TrainingTrace:
    """Run one seeded training loop and return its trace. No file I/O."""
    problem, dataset = build_problem(config.problem)
    opt = config.optimizer
    mode = opt.mode

    if dataset is not None:
        M = dataset.num_domains
        heldout = config.heldout_domain
        train_domains = [d for d in range(M) if d != heldout]
        counts = dataset.counts
        pool_dom = np.concatenate(
            [np.full(counts[d], d, dtype=np.int64) for d in train_domains]
        )
        pool_idx = np.concatenate(
            [np.arange(counts[d], dtype=np.int64) for d in train_domains]
        )
        n_pool = pool_dom.shape[0]
        batch_size = min(config.batch_size, n_pool)
        epoch_len = max(1, math.ceil(n_pool / batch_size))
        train_counts = np.array([counts[d] for d in train_domains], dtype=np.float64)
        train_weights = train_counts / train_counts.sum()
        w = problem.init_params(philox(seed, STREAM_INIT))
    else:
        M = problem.num_domains
        heldout = None
        train_domains = list(range(M))
        pool_dom = pool_idx = None
        n_pool = 0
        batch_size = config.batch_size
        epoch_len = max(1, config.steps // 20)
        train_weights = np.asarray(problem.weights, dtype=np.float64)
        w = philox(seed, STREAM_INIT).standard_normal(problem.param_dim)

    spec = None
    if mode in PERTURBED_MODES:
        spec = PerturbationSpec(
            rho=opt.rho, lam=opt.lam, mode=mode, beta_intuitive=opt.beta
        )
    state = OptimizerState(w=w, eta0=opt.eta0, schedule=opt.schedule, spec=spec)
    step_fn = make_step_fn(mode, vrex_beta=opt.beta)
    batch_rng = philox(seed, STREAM_BATCHES)

    eval_batches = None
    if epoch_summaries:
        eval_batches = _make_eval_batches(
            config, dataset, seed, train_domains, pool_dom, pool_idx, batch_size
        )

    sharp_rho = opt.rho
    steps_out = []
    epochs = []
    diverged = False
    for t in range(1, config.steps + 1):
        if dataset is not None:
            sel = batch_rng.choice(n_pool, size=batch_size, replace=False)
            batch = _group_batch(dataset, train_domains, pool_dom, pool_idx, sel)
        else:
            batch = None
        try:
            record = step_fn(state, problem, batch)
        except DivergenceError:
            diverged = True
            break
        steps_out.append(record)
        if epoch_summaries and (t % epoch_len == 0 or t == config.steps):
            epochs.append(
                _epoch_summary(
                    problem,
                    dataset,
                    state.w,
                    epoch=len(epochs),
                    t_end=t,
                    train_domains=train_domains,
                    heldout=heldout,
                    rho=sharp_rho,
                    eval_batches=eval_batches,
                )
            )

    if diverged:
        final_train_losses = None
        final_train_loss = math.inf
    else:
        report = problem.eval(
            state.w, dataset.full_batch(train_domains) if dataset is not None else None
        )
        final_train_losses = [float(v) for v in report.losses]
        final_train_loss = float(np.dot(train_weights, report.losses))

    metadata = {
        "config_hash": config.hash(),
        "seed": int(seed),
        "mode": mode,
        "num_domains": int(M),
        "train_domains": [int(d) for d in train_domains],
        "train_weights": [float(v) for v in train_weights],
        "heldout_domain": None if heldout is None else int(heldout),
        "epoch_len": int(epoch_len),
        "steps_requested": int(config.steps),
        "final_train_loss": final_train_loss,
        "final_train_losses": final_train_losses,
        "versions": {"python": platform.python_version(), "numpy": np.__version__},
    }
    return TrainingTrace(steps=steps_out, epochs=epochs, metadata=metadata, diverged=diverged)


def _make_eval_batches(config, dataset, seed, train_domains, pool_dom, pool_idx, batch_size):
    """Fixed mini-batches for the gradient-variance estimate, drawn once
    per run from their own stream."""
    if dataset is None:
        return [None] * 2
    rng = philox(seed, STREAM_EVAL_BATCHES)
    heldout = config.heldout_domain
    batches = []
    if heldout is not None:
        n = dataset.counts[heldout]
        size = min(batch_size, n)
        for _ in range(GRADVAR_BATCHES):
            idx = np.sort(rng.choice(n, size=size, replace=False))
            batches.append({heldout: dataset.take(heldout, idx)})
    else:
        n_pool = pool_dom.shape[0]
        for _ in range(GRADVAR_BATCHES):
            sel = rng.choice(n_pool, size=batch_size, replace=False)
            batches.append(_group_batch(dataset, train_domains, pool_dom, pool_idx, sel))
    return batches


def _epoch_summary(problem, dataset, w, epoch, t_end, train_domains, heldout, rho, eval_batches):
    if dataset is not None:
        full = dataset.full_batch(train_domains)
    else:
        full = None
    report = problem.eval(w, full)
    if heldout is not None:
        X_h, y_h = dataset.features[heldout], dataset.labels[heldout]
        h_loss, h_acc = heldout_domain_eval(problem, w, X_h, y_h)
    else:
        h_loss, h_acc = None, None
    ascent, ascent_deg = estimate_sharpness_ascent(problem, w, full, rho)
    gradvar = estimate_sharpness_gradvar(problem, w, eval_batches)
    return EpochSummary(
        epoch=epoch,
        t_end=t_end,
        domain_losses=report.losses.copy(),
        heldout_loss=h_loss,
        heldout_accuracy=h_acc,
        sharp_ascent=float(ascent),
        sharp_ascent_degenerate=bool(ascent_deg),
        sharp_gradvar=float(gradvar),
    )


def summarize_trace(trace: TrainingTrace) -> dict:
    """Final-state metrics of one run, for summary tables."""
    meta = trace.metadata
    out = {
        "seed": meta["seed"],
        "mode": meta["mode"],
        "diverged": trace.diverged,
        "steps_completed": trace.num_steps,
        "final_train_loss": meta["final_train_loss"],
        "final_domain_variance": None,
        "heldout_loss": None,
        "heldout_accuracy": None,
        "sharp_ascent": None,
        "sharp_gradvar": None,
        "median_phi_last_half": None,
    }
    if meta["final_train_losses"] is not None:
        out["final_domain_variance"] = domain_variance(meta["final_train_losses"])
    if trace.epochs:
        last = trace.final_epoch()
        out["heldout_loss"] = last.heldout_loss
        out["heldout_accuracy"] = last.heldout_accuracy
        out["sharp_ascent"] = last.sharp_ascent
        out["sharp_gradvar"] = last.sharp_gradvar
    if trace.steps:
        half = trace.median_phi(last_n=max(1, trace.steps[-1].t // 2))
        out["median_phi_last_half"] = None if math.isnan(half) else half
    return out


def _median_over(rows: list[dict], key: str):
    vals = [r[key] for r in rows if r[key] is not None and not r["diverged"]]
    if not vals:
        return None
    return float(np.median(vals))

AGGREGATE_KEYS = (
    "final_train_loss",
    "final_domain_variance",
    "heldout_loss",
    "heldout_accuracy",
    "sharp_ascent",
    "sharp_gradvar",
    "median_phi_last_half",
)


def aggregate_summaries(rows: list[dict]) -> dict:
    return {
        "per_seed": rows,
        "median": {k: _median_over(rows, k) for k in AGGREGATE_KEYS},
        "diverged_seeds": [r["seed"] for r in rows if r["diverged"]],
    }


def run_experiment(config: ExperimentConfig) -> list[TrainingTrace]:
    """Run every configured seed; write trace files when out_dir is set."""
    traces = [run_seed(config, seed) for seed in config.seeds]
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        for trace in traces:
            write_run_files(trace, config, config.out_dir)
        rows = [summarize_trace(t) for t in traces]
        payload = {
            "config": config.to_dict(),
            "config_hash": config.hash(),
            "summary": aggregate_summaries(rows),
        }
        _write_json(os.path.join(config.out_dir, f"summary_{config.optimizer.mode}.json"), payload)
    return traces


# ---------------------------------------------------------------------------
# serialization

def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def trace_csv_path(out_dir: str, mode: str, seed: int) -> str:
    return os.path.join(out_dir, f"trace_{mode}_seed{seed}.csv")


def write_run_files(trace: TrainingTrace, config: ExperimentConfig, out_dir: str) -> None:
    """One CSV of step records, one CSV of epoch summaries, one JSON sidecar."""
    meta = trace.metadata
    mode, seed = meta["mode"], meta["seed"]
    M = meta["num_domains"]
    header = (
        ["t", "eta", "loss_total"]
        + [f"loss_d{i}" for i in range(M)]
        + ["variance", "min_beta", "grad_norm", "di_grad_norm", "phi_t", "flags"]
    )
    with open(trace_csv_path(out_dir, mode, seed), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in trace.steps:
            by_domain = dict(zip(r.domain_ids, r.losses))
            row = [str(r.t), _fmt(r.eta), _fmt(r.total_loss)]
            row += [_fmt(by_domain.get(i)) for i in range(M)]
            row += [
                _fmt(r.variance),
                _fmt(r.betas.min()),
                _fmt(r.grad_norm),
                _fmt(r.di_grad_norm),
                _fmt(r.phi),
                "degenerate" if r.degenerate else "",
            ]
            writer.writerow(row)

    epoch_header = (
        ["epoch", "t_end"]
        + [f"loss_d{i}" for i in range(M)]
        + [
            "variance",
            "heldout_loss",
            "heldout_accuracy",
            "sharp_ascent",
            "sharp_gradvar",
            "flags",
        ]
    )
    train_domains = meta["train_domains"]
    epath = os.path.join(out_dir, f"epochs_{mode}_seed{seed}.csv")
    with open(epath, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(epoch_header)
        for e in trace.epochs:
            by_domain = dict(zip(train_domains, e.domain_losses))
            row = [str(e.epoch), str(e.t_end)]
            row += [_fmt(by_domain.get(i)) for i in range(M)]
            row += [
                _fmt(domain_variance(e.domain_losses)),
                _fmt(e.heldout_loss),
                _fmt(e.heldout_accuracy),
                _fmt(e.sharp_ascent),
                _fmt(e.sharp_gradvar),
                "ascent_degenerate" if e.sharp_ascent_degenerate else "",
            ]
            writer.writerow(row)

    sidecar = {
        "config": config.to_dict(),
        "config_hash": meta["config_hash"],
        "seed": seed,
        "diverged": trace.diverged,
        "metadata": {k: v for k, v in meta.items() if k != "config_hash"},
        "summary": summarize_trace(trace),
    }
    _write_json(os.path.join(out_dir, f"meta_{mode}_seed{seed}.json"), sidecar)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_csv_columns(path: str) -> dict[str, list]:
    """Read one of our CSVs back as {column: values}, blanks as None."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        cols: dict[str, list] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name, raw in row.items():
                if name == "flags":
                    cols[name].append(raw)
                elif raw == "" or raw is None:
                    cols[name].append(None)
                elif name in ("t", "epoch", "t_end"):
                    cols[name].append(int(raw))
                else:
                    cols[name].append(float(raw))
    return cols


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("rho", "lambda", "beta")
_AXIS_MODES = {
    "rho": (MODE_SAM, MODE_DISAM, MODE_INTUITIVE),
    "lambda": (MODE_DISAM,),
    "beta": (MODE_INTUITIVE, "vrex"),
}


@dataclass(frozen=True)
class SweepGrid:
    axis: str
    values: tuple[float, ...]
    base: ExperimentConfig

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("sweep needs at least one value")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("sweep values must be strictly increasing")
        if self.axis == "rho" and vals[0] <= 0:
            raise ValueError("rho values must be positive")
        if self.axis in ("lambda", "beta") and vals[0] < 0:
            raise ValueError(f"{self.axis} values must be nonnegative")
        mode = self.base.optimizer.mode
        if mode not in _AXIS_MODES[self.axis]:
            raise ValueError(f"axis {self.axis!r} does not apply to mode {mode!r}")
        object.__setattr__(self, "values", vals)

    def cell_config(self, index: int) -> ExperimentConfig:
        value = self.values[index]
        key = {"rho": "rho", "lambda": "lam", "beta": "beta"}[self.axis]
        cfg = with_optimizer(self.base, **{key: value})
        return dataclasses.replace(cfg, out_dir="")


def _sweep_cell(grid: SweepGrid, index: int) -> dict:
    cfg = grid.cell_config(index)
    rows = [summarize_trace(run_seed(cfg, s)) for s in cfg.seeds]
    agg = aggregate_summaries(rows)
    row = {"value": grid.values[index]}
    row.update(agg["median"])
    row["diverged"] = len(agg["diverged_seeds"])
    return row


def sweep(grid: SweepGrid, workers: int = 1) -> list[dict]:
    """One row of medians per grid value; cells run concurrently.

    Results are collected by cell index, so the table is identical for any
    worker count.
    """
    if workers < 1:
        raise ValueError("workers must be positive")
    indices = range(len(grid.values))
    if workers == 1:
        table = [_sweep_cell(grid, i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            table = list(pool.map(lambda i: _sweep_cell(grid, i), indices))
    if grid.base.out_dir:
        os.makedirs(grid.base.out_dir, exist_ok=True)
        _write_sweep_files(grid, table)
    return table


SWEEP_COLUMNS = ("value",) + AGGREGATE_KEYS + ("diverged",)


def _write_sweep_files(grid: SweepGrid, table: list[dict]) -> None:
    path = os.path.join(grid.base.out_dir, f"sweep_{grid.axis}.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in table:
            out = []
            for k in SWEEP_COLUMNS:
                v = row[k]
                out.append(str(v) if k == "diverged" else _fmt(v))
            writer.writerow(out)
    payload = {
        "axis": grid.axis,
        "values": list(grid.values),
        "base_config": grid.base.to_dict(),
        "base_hash": grid.base.hash(),
        "table": table,
    }
    _write_json(os.path.join(grid.base.out_dir, f"sweep_{grid.axis}.json"), payload)


# ---------------------------------------------------------------------------
# max-rho search

@dataclass(frozen=True)
class MaxRhoResult:
    rho: float
    flag: str | None
    tau: float
    probes: tuple[dict, ...]


def erm_reference_loss(config: ExperimentConfig) -> float:
    """Median final training loss of plain SGD over the config's seeds."""
    cfg = with_optimizer(config, mode=MODE_ERM)
    finals = [
        run_seed(cfg, s, epoch_summaries=False).metadata["final_train_loss"]
        for s in cfg.seeds
    ]
    return float(np.median(finals))


def max_rho_search(
    config: ExperimentConfig,
    rho_lo: float,
    rho_hi: float,
    tol: float = 0.01,
    tau: float | None = None,
) -> MaxRhoResult:
    """Bisect the largest rho whose runs still converge.

    Feasibility of a rho value: the final full-train loss stays at or
    below tau for a strict majority of the config's seeds. tau defaults to
    1.05x the median final loss of plain SGD on the same seeds, anchoring
    "converged" to a problem-relative baseline. If the low endpoint is
    infeasible or the high endpoint feasible there is no bracket to
    bisect; the relevant endpoint comes back flagged.
    """
    if not (0 < rho_lo < rho_hi):
        raise ValueError("need 0 < rho_lo < rho_hi")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if config.optimizer.mode not in PERTURBED_MODES:
        raise ValueError("max-rho search applies to perturbed modes only")
    if tau is None:
        tau = 1.05 * erm_reference_loss(config)

    probes = []

    def feasible(rho: float) -> bool:
        cfg = with_optimizer(config, rho=rho)
        finals = [
            run_seed(cfg, s, epoch_summaries=False).metadata["final_train_loss"]
            for s in cfg.seeds
        ]
        ok = sum(1 for v in finals if v <= tau)
        verdict = ok * 2 > len(finals)
        probes.append(
            {
                "rho": float(rho),
                "feasible": verdict,
                "median_final_loss": float(np.median(finals)),
                "feasible_seeds": ok,
            }
        )
        return verdict

    lo_ok = feasible(rho_lo)
    hi_ok = feasible(rho_hi)
    if not lo_ok:
        result = MaxRhoResult(rho_lo, FLAG_MONOTONICITY, tau, tuple(probes))
    elif hi_ok:
        result = MaxRhoResult(rho_hi, FLAG_MONOTONICITY, tau, tuple(probes))
    else:
        lo, hi = rho_lo, rho_hi
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
        result = MaxRhoResult(lo, None, tau, tuple(probes))

    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        payload = {
            "mode": config.optimizer.mode,
            "rho": result.rho,
            "flag": result.flag,
            "tau": result.tau,
            "probes": list(result.probes),
            "config_hash": config.hash(),
        }
        _write_json(
            os.path.join(config.out_dir, f"max_rho_{config.optimizer.mode}.json"),
            payload,
        )
    return result


# ---------------------------------------------------------------------------
# leave-one-domain-out

def leave_one_domain_out(config: ExperimentConfig) -> dict:
    """Run the experiment once per held-out domain choice and average.

    Medians across seeds are reported per holdout; the cross-holdout
    average is the mean of those medians.
    """
    if config.problem.kind != "clusters":
        raise ValueError("leave-one-domain-out requires a dataset problem")
    M = config.problem.num_domains
    if M < 3:
        raise ValueError("leave-one-domain-out needs at least three domains")

    rows = []
    for d in range(M):
        sub_out = os.path.join(config.out_dir, f"holdout{d}") if config.out_dir else ""
        cfg = dataclasses.replace(config, heldout_domain=d, out_dir=sub_out)
        traces = run_experiment(cfg)
        agg = aggregate_summaries([summarize_trace(t) for t in traces])
        row = {"heldout_domain": d}
        row.update(agg["median"])
        row["diverged"] = len(agg["diverged_seeds"])
        rows.append(row)

    def _mean(key):
        vals = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    average = {k: _mean(k) for k in AGGREGATE_KEYS}
    result = {"per_holdout": rows, "average": average}
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        payload = {
            "config": config.to_dict(),
            "config_hash": config.hash(),
            "mode": config.optimizer.mode,
        }
        payload.update(result)
        _write_json(os.path.join(config.out_dir, "lodo.json"), payload)
    return result
