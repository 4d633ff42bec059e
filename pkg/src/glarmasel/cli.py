"""Command-line entry point: simulate, fit, benchmark, filter, export-plot-data."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .io import (ConfigError, CountTableError, anova_filter, apply_section, export_counts,
                 fmt, load_config, load_counts, panel_table, section, write_header_block)
from .newton import NewtonConfig
from .pipeline import FitConfig, fit
from .simulate import (METHODS, aggregate_rows, gen_eta_star, parse_scenario,
                       replicate_seeds, run_experiment, simulate_panel)

logger = logging.getLogger(__name__)

PLOT_METRICS = ("tpr", "fpr", "max_diff", "sign_tpr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _thresholds(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _gammas(text):
    return tuple(float(v) for v in text.replace(":", ",").split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glarmasel", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, fit_flags=True):
        p.add_argument("--config", help="flat 'section.key = value' settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if fit_flags:
            p.add_argument("--q", type=int)
            p.add_argument("--thresholds", type=_thresholds)
            p.add_argument("--threshold", type=float, help="primary threshold")
            p.add_argument("--subsamples", type=int)
            p.add_argument("--max-outer", type=int)
            p.add_argument("--oracle-gamma", type=_gammas)
            p.add_argument("--workers", type=int)

    p = sub.add_parser("simulate", help="draw panels and their true eta")
    common(p, fit_flags=False)
    p.add_argument("--scenario")
    p.add_argument("--reps", type=int)

    p = sub.add_parser("fit", help="fit a count table")
    common(p)
    p.add_argument("counts")
    p.add_argument("--condition-order")
    p.add_argument("--series-order")

    p = sub.add_parser("benchmark", help="run methods over simulated replicates")
    common(p)
    p.add_argument("--scenario")
    p.add_argument("--methods")
    p.add_argument("--reps", type=int)
    p.add_argument("--record-timings", action="store_true",
                   help="add wall-clock times (makes output non-reproducible)")

    p = sub.add_parser("filter", help="Poisson ANOVA pre-filter")
    common(p, fit_flags=False)
    p.add_argument("counts")
    p.add_argument("--rule", help="'one-over-T' or a significance level")
    p.add_argument("--method", choices=("lrt", "wald"))

    p = sub.add_parser("export-plot-data", help="tidy per-threshold metric table")
    p.add_argument("metrics", help="metrics.csv written by benchmark")
    p.add_argument("--out", help="output directory")
    return parser


# Resolution of settings: defaults, then config file, then flags.

def _load(args) -> dict:
    return load_config(args.config) if getattr(args, "config", None) else {}


def _fit_config(args, config: dict) -> FitConfig:
    cfg = apply_section(FitConfig(), section(config, "fit"))
    cfg = replace(cfg, newton=apply_section(NewtonConfig(), section(config, "newton")))
    flags = {
        "q": args.q, "thresholds": args.thresholds, "primary_threshold": args.threshold,
        "n_subsamples": args.subsamples, "max_outer_iter": args.max_outer,
        "oracle_gamma": args.oracle_gamma, "workers": args.workers,
        "seed": _seed(args, config),
    }
    cfg = replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    if cfg.oracle_gamma is not None and args.q is None and "fit.q" not in config:
        cfg = replace(cfg, q=len(cfg.oracle_gamma))
    if cfg.primary_threshold not in cfg.thresholds:
        raise ValueError(f"primary threshold {cfg.primary_threshold:g} is not one of the "
                         f"thresholds {list(cfg.thresholds)}")
    return cfg


def _seed(args, config) -> int:
    return args.seed if args.seed is not None else config.get("run.seed", 0)


def _scenario(args, config: dict):
    values = section(config, "scenario")
    name = args.scenario or values.pop("name", None) or "table1-row1"
    values.pop("name", None)
    scenario = apply_section(parse_scenario(name), values)
    overrides = {"seed": _seed(args, config)}
    if args.reps is not None:
        overrides["n_reps"] = args.reps
    return name, replace(scenario, **overrides)


def _out_dir(args, config) -> Path:
    out = Path(args.out or config.get("run.out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fit_header(cfg: FitConfig) -> dict:
    """Resolved settings; the worker count is left out since it never changes results."""
    return {
        "fit.q": cfg.q, "fit.thresholds": cfg.thresholds,
        "fit.primary_threshold": cfg.primary_threshold,
        "fit.max_outer_iter": cfg.max_outer_iter, "fit.gamma_stab_tol": cfg.gamma_stab_tol,
        "fit.oracle_gamma": "none" if cfg.oracle_gamma is None else cfg.oracle_gamma,
        "fit.n_subsamples": cfg.n_subsamples, "fit.n_lambda": cfg.n_lambda,
        "fit.lambda_ratio": cfg.lambda_ratio, "newton.tol": cfg.newton.tol,
        "newton.max_iter": cfg.newton.max_iter,
        "newton.step_halving_max": cfg.newton.step_halving_max, "run.seed": cfg.seed,
    }


def _scenario_header(name, scenario) -> dict:
    return {
        "scenario.name": name, "scenario.T": scenario.T, "scenario.J": scenario.J,
        "scenario.I": scenario.I, "scenario.q_star": scenario.q_star,
        "scenario.gamma_star": scenario.gamma_star or "none",
        "scenario.n_nonnull": scenario.n_nonnull,
        "scenario.magnitude_range": scenario.magnitude_range,
        "scenario.sign_policy": scenario.sign_policy, "scenario.n_reps": scenario.n_reps,
    }


def _write_csv(path: Path, header: dict, columns, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        write_header_block(fh, header)
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(f"{float(x):.9g}")
        return x if np.isfinite(x) else None
    return x


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


# Subcommands

def cmd_simulate(args) -> int:
    config = _load(args)
    name, scenario = _scenario(args, config)
    out = _out_dir(args, config)
    header = {**_scenario_header(name, scenario), "run.seed": scenario.seed}
    files = []
    for rep in range(scenario.n_reps):
        eta_ss, panel_ss, _, _ = replicate_seeds(scenario, rep)
        eta_star = gen_eta_star(scenario, eta_ss)
        table = panel_table(simulate_panel(scenario, eta_star, panel_ss))
        panel_path = out / f"panel_rep{rep:03d}.csv"
        truth_path = out / f"truth_rep{rep:03d}.csv"
        export_counts(table, panel_path, {**header, "replicate": rep})
        _write_csv(truth_path, {**header, "replicate": rep}, ("condition", "series", "eta_star"),
                   [(table.conditions[i], table.series[t], eta_star[i, t])
                    for i in range(scenario.I) for t in range(scenario.T)])
        files += [panel_path.name, truth_path.name]
    _write_json(out / "summary.json", {"command": "simulate", "config": header, "files": files})
    return 0


def cmd_fit(args) -> int:
    config = _load(args)
    cfg = _fit_config(args, config)
    table = load_counts(args.counts, args.condition_order, args.series_order)
    out = _out_dir(args, config)
    res = fit(table.data, cfg)
    header = {"input": Path(args.counts).name, **_fit_header(cfg)}
    conds, series = table.conditions, table.series
    cells = [(i, t) for i in range(table.data.I) for t in range(table.data.T)]

    lag_cols = tuple(f"gamma_{k + 1}" for k in range(cfg.q))
    _write_csv(out / "gamma_trace.csv", header,
               ("iteration",) + lag_cols + ("support_size", "loglik", "lambda",
                                            "newton_converged", "newton_iterations"),
               [(s.iteration, *s.gamma, s.support_size, s.loglik, s.lambda_used,
                 s.newton_converged, s.newton_iterations) for s in res.outer_trace])
    _write_csv(out / "frequencies.csv", header, ("condition", "series", "frequency"),
               [(conds[i], series[t], res.frequencies[i, t]) for i, t in cells])
    _write_csv(out / "eta_hat.csv", header, ("condition", "series", "eta_hat"),
               [(conds[i], series[t], res.eta_hat[i, t]) for i, t in cells])
    _write_csv(out / "support.csv", header, ("threshold", "condition", "series"),
               [(thr, conds[i], series[t]) for thr in cfg.thresholds
                for i, t in cells if res.frequencies[i, t] > thr])
    _write_json(out / "summary.json", {
        "command": "fit", "config": header,
        "gamma_hat": res.gamma_hat, "converged": res.converged,
        "outer_iterations": len(res.outer_trace),
        "support_size": {fmt(thr): int(res.support(thr).sum()) for thr in cfg.thresholds},
        "stabilization_rule": res.metadata["stabilization_rule"],
        "lambda_rule": res.metadata["lambda_rule"],
        "dimensions": {"I": table.data.I, "T": table.data.T,
                       "replicates": table.data.rep_counts.tolist()},
    })
    return 0


METRIC_COLUMNS = ("rep", "method", "threshold", "tpr", "fpr", "max_diff", "sign_tpr")


def cmd_benchmark(args) -> int:
    config = _load(args)
    name, scenario = _scenario(args, config)
    cfg = _fit_config(args, config)
    methods = (tuple(m.strip() for m in args.methods.split(",") if m.strip())
               if args.methods else config.get("run.methods", ("q0", "q1", "classical")))
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; expected a subset of {list(METHODS)}")
    timings = args.record_timings or config.get("run.record_timings", False)
    out = _out_dir(args, config)
    result = run_experiment(scenario, methods, cfg, record_time=timings)
    header = {**_scenario_header(name, scenario), **_fit_header(cfg),
              "run.methods": methods, "run.record_timings": timings}
    q_max = max([len(r["gamma_hat"]) for r in result.rows] + [0])
    lag_cols = tuple(f"gamma_{k + 1}" for k in range(q_max))
    columns = METRIC_COLUMNS + lag_cols + (("wall_time",) if timings else ())

    def row(r):
        g = list(r["gamma_hat"]) + [""] * (q_max - len(r["gamma_hat"]))
        vals = [r[c] for c in METRIC_COLUMNS] + g
        return vals + ([r["wall_time"]] if timings else [])

    _write_csv(out / "metrics.csv", header, columns, [row(r) for r in result.rows])
    agg = aggregate_rows(result.rows)
    agg_cols = ("method", "threshold", "n_reps") + tuple(
        f"{m}_{s}" for m in PLOT_METRICS for s in ("mean", "se"))
    _write_csv(out / "aggregate.csv", header, agg_cols,
               [] if agg.empty else agg[list(agg_cols)].itertuples(index=False))
    samples = [(m, k, it + 1, lag + 1, path[it, lag])
               for m, paths in sorted(result.gamma_samples.items())
               for k, path in enumerate(paths)
               for it in range(path.shape[0]) for lag in range(path.shape[1])]
    _write_csv(out / "gamma_samples.csv", header,
               ("method", "rep", "iteration", "lag", "gamma"), samples)
    _write_json(out / "summary.json", {
        "command": "benchmark", "config": header, "n_rows": len(result.rows),
        "failures": result.failures,
    })
    return 0 if not result.failures else 1


def cmd_filter(args) -> int:
    config = _load(args)
    table = load_counts(args.counts)
    out = _out_dir(args, config)
    rule = args.rule or config.get("filter.rule", "one-over-T")
    method = args.method or config.get("filter.method", "lrt")
    res = anova_filter(table.data, rule, method)
    header = {"input": Path(args.counts).name, "filter.rule": rule, "filter.method": method,
              "filter.cutoff": res.cutoff, "filter.df": res.df}
    kept = set(res.kept.tolist())
    _write_csv(out / "filter.csv", header, ("series", "statistic", "pvalue", "kept"),
               [(s, res.statistics[t], res.pvalues[t], t in kept)
                for t, s in enumerate(table.series)])
    export_counts(table.subset(res.kept), out / "kept_counts.csv", header)
    _write_json(out / "summary.json", {"command": "filter", "config": header,
                                       "n_series": table.data.T, "n_kept": len(kept)})
    return 0


def _read_rows(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cmd_export_plot_data(args) -> int:
    rows = _read_rows(args.metrics)
    if not rows:
        raise ValueError(f"{args.metrics}: no metric rows")
    missing = [c for c in METRIC_COLUMNS if c not in rows[0]]
    if missing:
        raise ValueError(f"{args.metrics}: missing columns {missing}")
    parsed = [{"method": r["method"], "threshold": float(r["threshold"]),
               **{m: float(r[m]) if r[m] not in ("", "nan") else np.nan for m in PLOT_METRICS}}
              for r in rows]
    agg = aggregate_rows(parsed)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    tidy = [(r.method, r.threshold, m, getattr(r, f"{m}_mean"), getattr(r, f"{m}_se"), r.n_reps)
            for r in agg.itertuples(index=False) for m in PLOT_METRICS]
    _write_csv(out / "plot_data.csv", {"input": Path(args.metrics).name},
               ("method", "threshold", "metric", "mean", "se", "n_reps"), tidy)
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "benchmark": cmd_benchmark,
            "filter": cmd_filter, "export-plot-data": cmd_export_plot_data}


def run_command(argv=None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit status."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"glarmasel: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CountTableError, ConfigError, ValueError, OSError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"glarmasel {args.command}: error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
