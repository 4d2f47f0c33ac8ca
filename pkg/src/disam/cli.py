"""Command-line harness.

Subcommands: run (seeded training runs), sweep (one axis, many values),
max-rho (bisection for the largest converging perturbation radius), lodo
(leave-one-domain-out protocol), check (built-in oracle suite), report
(render figures from previously written CSVs).

Exit codes: 0 success (a DIVERGED run is a reported outcome, not an
error), 1 validation failure, 2 I/O or config-file error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import ConfigError, config_from_file, default_toy_config, with_optimizer
from .harness import (
    SweepGrid,
    aggregate_summaries,
    leave_one_domain_out,
    max_rho_search,
    run_experiment,
    summarize_trace,
    sweep,
)
from .optimizers import ALL_MODES


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated float list: {text!r}") from exc


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; defaults to the built-in toy experiment")
    seeds = sub.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="run a single seed")
    seeds.add_argument("--seeds", type=int, help="run seeds 0..n-1")
    sub.add_argument("--out", help="output directory for CSV traces and JSON summaries")
    sub.add_argument("--mode", choices=ALL_MODES, help="optimizer mode override")
    sub.add_argument("--rho", type=float, help="perturbation radius override")
    sub.add_argument("--lambda", dest="lam", type=float, help="variance weight override")
    sub.add_argument("--beta", type=float, help="intuitive/vrex weight override")
    sub.add_argument("--steps", type=int, help="step count override")
    sub.add_argument("--plots", action="store_true", help="render figures next to the CSVs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disam",
        description="Multi-domain training experiments with variance-aware perturbation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train with the configured optimizer over all seeds")
    _add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="run a one-axis hyperparameter sweep")
    _add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=("rho", "lambda", "beta"))
    p_sweep.add_argument("--values", required=True, type=_float_list,
                         help="comma-separated increasing values")
    p_sweep.add_argument("--workers", type=int, default=1, help="concurrent sweep cells")

    p_max = sub.add_parser("max-rho", help="bisect the largest rho that still converges")
    _add_common(p_max)
    p_max.add_argument("--rho-lo", type=float, default=0.01)
    p_max.add_argument("--rho-hi", type=float, default=0.64)
    p_max.add_argument("--tol", type=float, default=0.01)
    p_max.add_argument("--tau", type=float, help="feasibility loss threshold; default 1.05x the plain-SGD final loss")

    p_lodo = sub.add_parser("lodo", help="leave-one-domain-out over every domain")
    _add_common(p_lodo)

    sub.add_parser("check", help="run the built-in oracle checks")

    p_rep = sub.add_parser("report", help="render figures from an output directory")
    p_rep.add_argument("--in", dest="in_dir", required=True, help="directory with trace/sweep CSVs")

    return parser


def _config_from_args(args) -> "ExperimentConfig":
    cfg = config_from_file(args.config) if args.config else default_toy_config()
    opt = {}
    for key in ("mode", "rho", "lam", "beta"):
        value = getattr(args, key, None)
        if value is not None:
            opt[key] = value
    if opt:
        cfg = with_optimizer(cfg, **opt)
    top = {}
    if getattr(args, "seed", None) is not None:
        top["seeds"] = (args.seed,)
    if getattr(args, "seeds", None) is not None:
        top["seeds"] = tuple(range(args.seeds))
    if getattr(args, "out", None) is not None:
        top["out_dir"] = args.out
    if getattr(args, "steps", None) is not None:
        top["steps"] = args.steps
    if top:
        cfg = dataclasses.replace(cfg, **top)
    return cfg


def _fmt_cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _print_summary_rows(rows: list[dict], keys: tuple[str, ...]) -> None:
    for row in rows:
        parts = [f"{k}={_fmt_cell(row.get(k))}" for k in keys]
        print("  ".join(parts))


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    traces = run_experiment(cfg)
    rows = [summarize_trace(t) for t in traces]
    keys = (
        "seed",
        "final_train_loss",
        "final_domain_variance",
        "heldout_loss",
        "heldout_accuracy",
        "median_phi_last_half",
        "diverged",
    )
    _print_summary_rows(rows, keys)
    agg = aggregate_summaries(rows)["median"]
    print("median: " + "  ".join(f"{k}={_fmt_cell(v)}" for k, v in agg.items()))
    if cfg.out_dir:
        print(f"wrote traces to {cfg.out_dir}")
        if args.plots:
            from .report import render_run_figure

            for t in traces:
                path = render_run_figure(cfg.out_dir, cfg.optimizer.mode, t.metadata["seed"])
                print(f"wrote {path}")
    elif args.plots:
        print("warning: --plots needs --out", file=sys.stderr)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    grid = SweepGrid(axis=args.axis, values=args.values, base=cfg)
    table = sweep(grid, workers=args.workers)
    keys = ("value", "final_train_loss", "heldout_loss", "heldout_accuracy",
            "sharp_gradvar", "median_phi_last_half", "diverged")
    _print_summary_rows(table, keys)
    if cfg.out_dir:
        print(f"wrote sweep table to {cfg.out_dir}")
        if args.plots:
            from .report import render_sweep_figure

            print(f"wrote {render_sweep_figure(cfg.out_dir, args.axis)}")
    return 0


def _cmd_max_rho(args) -> int:
    cfg = _config_from_args(args)
    result = max_rho_search(cfg, args.rho_lo, args.rho_hi, tol=args.tol, tau=args.tau)
    flag = f"  flag={result.flag}" if result.flag else ""
    print(
        f"mode={cfg.optimizer.mode}  max_rho={result.rho:.6g}  tau={result.tau:.6g}"
        f"  probes={len(result.probes)}{flag}"
    )
    return 0


def _cmd_lodo(args) -> int:
    cfg = _config_from_args(args)
    result = leave_one_domain_out(cfg)
    keys = ("heldout_domain", "final_train_loss", "heldout_loss",
            "heldout_accuracy", "diverged")
    _print_summary_rows(result["per_holdout"], keys)
    avg = result["average"]
    print("average: " + "  ".join(f"{k}={_fmt_cell(v)}" for k, v in avg.items()))
    return 0


def _cmd_check(_args) -> int:
    from .checks import run_checks

    return 0 if run_checks() else 1


def _cmd_report(args) -> int:
    from .report import render_all

    written = render_all(args.in_dir)
    if not written:
        print(f"no trace or sweep CSVs found in {args.in_dir}")
    for path in written:
        print(f"wrote {path}")
    return 0


_DISPATCH = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "max-rho": _cmd_max_rho,
    "lodo": _cmd_lodo,
    "check": _cmd_check,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
