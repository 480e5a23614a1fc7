"""Benchmark artifacts: metrics CSV, markdown summary, SVG plots, provenance."""

from __future__ import annotations

import csv
import json
import math
import platform
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .bench import METRIC_FIELDS, ExperimentConfig, ExperimentResult, MetricsRow

CSV_FIELDS = ("scenario", "method", "replicate", "k", "M", "pred", "beta_rmse", "imp_rmse", "status")
METRIC_TITLES = {"pred": "Pred", "beta_rmse": "β", "imp_rmse": "Imp"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, f)) for f in CSV_FIELDS])


def write_timings_csv(rows: Sequence[MetricsRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "replicate", "wall_time"])
        for r in rows:
            w.writerow([r.scenario, r.method, r.replicate, f"{r.wall_time:.3f}"])


def read_metrics_csv(path) -> list:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            num = lambda s: float(s) if s not in ("", None) else math.nan  # noqa: E731
            rows.append(
                MetricsRow(
                    scenario=rec["scenario"],
                    method=rec["method"],
                    replicate=int(rec["replicate"]),
                    pred=num(rec["pred"]),
                    beta_rmse=num(rec["beta_rmse"]),
                    imp_rmse=num(rec["imp_rmse"]),
                    k=int(rec["k"]) if rec.get("k") else None,
                    M=int(rec["M"]) if rec.get("M") else 1,
                    status=rec.get("status", "ok"),
                )
            )
    return rows


def aggregate(rows: Iterable[MetricsRow]) -> "OrderedDict":
    """Mean of each metric over successful replicates, keyed by
    (scenario, method) in first-appearance order."""
    groups: OrderedDict = OrderedDict()
    for r in rows:
        g = groups.setdefault((r.scenario, r.method), {f: [] for f in METRIC_FIELDS} | {"n_ok": 0, "n": 0})
        g["n"] += 1
        if r.status != "ok":
            continue
        g["n_ok"] += 1
        for f in METRIC_FIELDS:
            v = getattr(r, f)
            if v is not None and not math.isnan(v):
                g[f].append(v)
    out: OrderedDict = OrderedDict()
    for key, g in groups.items():
        out[key] = {f: (float(np.mean(g[f])) if g[f] else math.nan) for f in METRIC_FIELDS}
        out[key]["n_ok"], out[key]["n"] = g["n_ok"], g["n"]
    return out


def _minima(agg, scenario) -> dict:
    mins = {}
    for f in METRIC_FIELDS:
        vals = [v[f] for (s, _), v in agg.items() if s == scenario and not math.isnan(v[f])]
        mins[f] = min(vals) if vals else None
    return mins


def summary_markdown(rows: Sequence[MetricsRow], digits: int = 3) -> str:
    """One table per scenario; the smallest mean in each column is bold
    (all tied entries when several share it)."""
    agg = aggregate(rows)
    scenarios = list(OrderedDict.fromkeys(s for s, _ in agg))
    lines = []
    for sc in scenarios:
        mins = _minima(agg, sc)
        used = [f for f in METRIC_FIELDS if mins[f] is not None]
        lines.append(f"## {sc}")
        lines.append("")
        lines.append("| Method | " + " | ".join(METRIC_TITLES[f] for f in used) + " | ok/runs |")
        lines.append("|---|" + "---|" * len(used) + "---|")
        for (s, method), v in agg.items():
            if s != sc:
                continue
            cells = []
            for f in used:
                x = v[f]
                if math.isnan(x):
                    cells.append("")
                    continue
                text = f"{x:.{digits}f}"
                cells.append(f"**{text}**" if math.isclose(x, mins[f], rel_tol=0, abs_tol=1e-12) else text)
            lines.append(f"| {method.upper()} | " + " | ".join(cells) + f" | {v['n_ok']}/{v['n']} |")
        lines.append("")
    return "\n".join(lines)


# --- plots ----------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed ids and no timestamp keep SVG bytes reproducible
    matplotlib.rcParams["svg.hashsalt"] = "sparsefn"
    matplotlib.rcParams["svg.fonttype"] = "path"
    return plt


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_beta(art: dict, path) -> bool:
    """Estimated coefficient functions against the truth."""
    if art.get("beta_true") is None:
        return False
    plt = _pyplot()
    t = np.asarray(art["grid"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, art["beta_true"], color="black", lw=2, label="true")
    for name, m in art["methods"].items():
        if m.get("beta_hat") is not None:
            ax.plot(t, m["beta_hat"], lw=1.2, label=name.upper())
    ax.set_xlabel("t")
    ax.set_ylabel("beta(t)")
    ax.set_title(f"{art['scenario']} (replicate {art['replicate']})")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
    return True


def plot_curves(art: dict, path) -> bool:
    """Completed versions of one held-out curve from every method."""
    if not art.get("methods"):
        return False
    plt = _pyplot()
    t = np.asarray(art["grid"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, art["curve_truth"], color="black", lw=2, label="truth")
    obs = np.asarray(art["curve_observed"], dtype=float)
    ax.plot(t, obs, "o", color="black", ms=4, label="observed")
    for name, m in art["methods"].items():
        ax.plot(t, m["curve"], lw=1.1, label=name.upper())
    ax.set_xlabel("t")
    ax.set_ylabel("X(t)")
    ax.set_title(f"curve {art['curve_row']}, {art['scenario']}")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
    return True


def write_plots(artifacts: Sequence[dict], plot_dir) -> list:
    plot_dir = Path(plot_dir)
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for art in artifacts:
        stem = art["scenario"]
        for kind, fn in (("beta", plot_beta), ("curves", plot_curves)):
            p = plot_dir / f"{kind}_{stem}.svg"
            if fn(art, p):
                written.append(p)
    return written


# --- provenance ----------------------------------------------------------------


def versions() -> dict:
    import matplotlib
    import numba
    import scipy

    from . import __version__

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "matplotlib": matplotlib.__version__,
        "sparsefn": __version__,
    }


def emit_report(
    result: ExperimentResult,
    out_dir,
    cfg: Optional[ExperimentConfig] = None,
    plots: bool = True,
    timings: bool = False,
) -> dict:
    """Write ``metrics.csv``, ``summary.md``, ``plots/*.svg``,
    ``artifacts.json`` and ``run.json`` under ``out_dir``."""
    if not result.rows:
        raise ValueError("cannot report an empty metrics table")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"metrics": out / "metrics.csv", "summary": out / "summary.md", "run": out / "run.json"}
    write_metrics_csv(result.rows, files["metrics"])
    files["summary"].write_text(summary_markdown(result.rows), encoding="utf-8")
    if timings:
        files["timings"] = out / "timings.csv"
        write_timings_csv(result.rows, files["timings"])
    if result.artifacts:
        files["artifacts"] = out / "artifacts.json"
        files["artifacts"].write_text(json.dumps(result.artifacts, indent=1, allow_nan=True), encoding="utf-8")
    if plots:
        files["plots"] = write_plots(result.artifacts, out / "plots")
    run = {"config": cfg.to_dict() if cfg else None, "seeds": result.seeds, "versions": versions()}
    files["run"].write_text(json.dumps(run, indent=2, sort_keys=True), encoding="utf-8")
    return files


def report_from_dir(in_dir, out_dir=None, plots: bool = True) -> dict:
    """Rebuild the summary (and plots, when ``artifacts.json`` exists) from
    a finished benchmark directory."""
    src = Path(in_dir)
    metrics = src / "metrics.csv" if src.is_dir() else src
    base = metrics.parent
    out = Path(out_dir) if out_dir else base
    out.mkdir(parents=True, exist_ok=True)
    rows = read_metrics_csv(metrics)
    if not rows:
        raise ValueError(f"{metrics}: empty metrics table")
    files = {"summary": out / "summary.md"}
    files["summary"].write_text(summary_markdown(rows), encoding="utf-8")
    art_path = base / "artifacts.json"
    if plots and art_path.exists():
        files["plots"] = write_plots(json.loads(art_path.read_text(encoding="utf-8")), out / "plots")
    return files
