"""Command-line entry point: ``sparsefn {simulate,impute,fit,benchmark,report}``."""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import sofr
from .bench import load_config, run_experiment
from .errors import SparseFnError
from .funcdata import (
    Grid,
    align_to_grid,
    load_dataset,
    make_grid,
    write_long_csv,
    write_response_csv,
)
from .impute import METHOD_NAMES, ImputationTask, impute, parse_method
from .report import emit_report, report_from_dir
from .sim import RESPONSE_KINDS, ResponseSpec, SparsitySpec, generate


def _grid_for(ds, m):
    if m:
        return make_grid(m)
    t, _ = ds.pooled()
    return Grid(np.unique(t))


def cmd_simulate(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = make_grid(a.m)
    resp = ResponseSpec(a.response, w=a.w, sigma_eps2=a.sigma_eps2, f_id=a.f_id)
    d = generate(a.n, grid, SparsitySpec(a.sparsity), resp, seed=a.seed)
    ids = [f"c{i + 1:04d}" for i in range(a.n)]
    g = grid.points
    write_long_csv(out / "observed.csv", ids, g, d.matrix.values, d.mask)
    write_long_csv(out / "truth.csv", ids, g, d.truth)
    write_response_csv(out / "response.csv", ids, d.response)
    print(f"wrote {a.n} curves on m={a.m} to {out}")
    return 0


def cmd_impute(a) -> int:
    ds = load_dataset(a.input, a.response)
    grid = _grid_for(ds, a.grid_m)
    mat = align_to_grid(ds, grid, snap=a.snap)
    kw = {"M": a.imputations} if a.imputations else {}
    spec = parse_method(a.method, k=a.bins, **kw)
    task = ImputationTask(mat, ds.response if spec.include_response else None)
    res = impute(task, spec, seed=a.seed)
    ids = list(ds.ids)
    paths = []
    for i, z in enumerate(res.completed, start=1):
        p = Path(a.output.replace("{i}", str(i)) if "{i}" in a.output else (f"{a.output}_{i}.csv" if res.M > 1 else a.output))
        p.parent.mkdir(parents=True, exist_ok=True)
        write_long_csv(p, ids, grid.points, z)
        paths.append(str(p))
    print(f"{spec.name}: {res.M} completed set(s), {res.n_cycles_run} cycles -> {', '.join(paths)}")
    return 0


def cmd_fit(a) -> int:
    ds = load_dataset(a.input, a.response)
    grid = _grid_for(ds, a.grid_m)
    mat = align_to_grid(ds, grid)
    if mat.n_missing:
        raise SparseFnError(f"{a.input}: fitting needs complete curves ({mat.n_missing} cells missing); impute first")
    X = mat.values
    y = ds.response
    if a.model == "linear":
        model = sofr.fit_linear_sofr(X, y, grid)
    elif a.model == "logistic":
        model = sofr.fit_logistic_sofr(X, y, grid)
    else:
        model = sofr.fit_cam(X, y, grid)
    sofr.save_model(model, a.out)
    lam = getattr(model, "penalty_lambda", None) or getattr(model, "penalty_lambdas", None)
    print(f"{a.model} model (lambda {lam}) -> {a.out}")
    return 0


def cmd_benchmark(a) -> int:
    overrides = {"seed": a.seed, "output_dir": a.out}
    if a.fast:
        overrides["replicates"] = 3
    cfg = load_config(a.config, **overrides)
    result = run_experiment(cfg)
    files = emit_report(result, cfg.output_dir, cfg, plots=not a.no_plots, timings=a.timings)
    failed = sum(r.status != "ok" for r in result.rows)
    print(f"{len(result.rows)} rows ({failed} failed) -> {files['metrics']}")
    return 0


def cmd_report(a) -> int:
    files = report_from_dir(a.input, a.out, plots=not a.no_plots)
    print(f"summary -> {files['summary']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsefn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw a synthetic sparse functional dataset")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--m", type=int, default=32)
    s.add_argument("--sparsity", choices=("medium", "high"), default="medium")
    s.add_argument("--response", choices=RESPONSE_KINDS, default="linear-scalar")
    s.add_argument("--w", type=float, default=1.0)
    s.add_argument("--sigma-eps2", type=float, default=1.0)
    s.add_argument("--f-id", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("impute", help="complete sparse curves")
    s.add_argument("--method", choices=METHOD_NAMES, required=True)
    s.add_argument("--bins", type=int, default=None, help="bin count k for *_b methods")
    s.add_argument("--imputations", type=int, default=None, help="number of completed sets M")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--input", required=True, help="long CSV curve_id,time,value")
    s.add_argument("--response", default=None, help="CSV curve_id,y")
    s.add_argument("--grid-m", type=int, default=None, help="equally spaced grid size (default: observed times)")
    s.add_argument("--snap", action="store_true", help="snap times to the nearest grid point")
    s.add_argument("--output", required=True, help="path, may contain {i} for the imputation index")
    s.set_defaults(func=cmd_impute)

    s = sub.add_parser("fit", help="fit a scalar-on-function model to complete curves")
    s.add_argument("--model", choices=("linear", "logistic", "cam"), required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--response", required=True)
    s.add_argument("--grid-m", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("benchmark", help="run a simulation benchmark from a TOML config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="output directory (overrides the config)")
    s.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    s.add_argument("--fast", action="store_true", help="3 replicates")
    s.add_argument("--timings", action="store_true", help="also write timings.csv")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("report", help="rebuild summary and plots from a benchmark directory")
    s.add_argument("--input", required=True, help="benchmark directory or metrics.csv")
    s.add_argument("--out", default=None)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (SparseFnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
