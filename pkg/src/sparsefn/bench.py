"""Experiment runner: simulate, impute with every method, fit, score.

Each replicate draws a fresh dataset, splits it 70/30 into train and test
rows, imputes all curves jointly with only the training responses visible,
fits the downstream model on the training rows of every completed set and
scores the pooled fit on the test rows.
"""

from __future__ import annotations

import itertools
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import sofr
from .errors import InvalidArgument
from .forests import ForestParams
from .funcdata import (
    Grid,
    IncompleteMatrix,
    SparseFunctionalDataset,
    align_to_grid,
    make_grid,
    read_long_csv,
    read_response_csv,
)
from .impute import METHOD_NAMES, ImputationTask, impute, parse_method, pool
from .sim import RESPONSE_KINDS, GeneratedDataset, ResponseSpec, SparsitySpec, generate

# bin counts printed with the paper-style tables, by (m, sparsity)
DEFAULT_BINS = {(32, "medium"): 17, (32, "high"): 8, (52, "medium"): 27, (52, "high"): 12}


def default_bins(m: int, level: str) -> int:
    if (m, level) in DEFAULT_BINS:
        return DEFAULT_BINS[(m, level)]
    return max(2, min(m, m // 2 + 1 if level == "medium" else round(m / 4)))


@dataclass(frozen=True)
class Scenario:
    n: int
    m: int
    sparsity: str
    response: str

    @property
    def label(self) -> str:
        return f"n{self.n}_m{self.m}_{self.sparsity}_{self.response}"


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class ExperimentConfig:
    """One benchmark run. ``n``, ``m`` and ``sparsity`` may be lists; the
    scenarios are their product."""

    n: object = 500
    m: object = 32
    sparsity: object = "medium"
    response: str = "linear-scalar"
    w: float = 1.0
    alpha: float = 0.0
    sigma_eps2: float = 1.0
    f_id: Optional[str] = None
    methods: Sequence[str] = ("pace", "mice", "mf", "mf_b")
    bins: dict = field(default_factory=dict)  # method -> k, or "m,level" -> k
    imputations: dict = field(default_factory=dict)  # method -> M
    replicates: int = 10
    seed: int = 0
    train_fraction: float = 0.7
    n_trees: int = 100
    output_dir: str = "results"

    def __post_init__(self):
        if self.replicates < 1:
            raise InvalidArgument("replicates must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise InvalidArgument("train_fraction must lie in (0, 1)")
        if self.response not in RESPONSE_KINDS:
            raise InvalidArgument(f"unknown response kind {self.response!r}")
        self.methods = tuple(str(x).lower() for x in _as_list(self.methods))
        if not self.methods:
            raise InvalidArgument("no methods configured")
        for name in self.methods:
            if name not in METHOD_NAMES:
                raise InvalidArgument(f"unknown method {name!r}")
        for lvl in _as_list(self.sparsity):
            SparsitySpec(lvl)
        for m in _as_list(self.m):
            make_grid(m)
        ResponseSpec(self.response, self.w, self.alpha, self.sigma_eps2, self.f_id)

    @property
    def scenarios(self) -> list:
        return [
            Scenario(int(n), int(m), str(s).lower(), self.response)
            for n, m, s in itertools.product(_as_list(self.n), _as_list(self.m), _as_list(self.sparsity))
        ]

    def bins_for(self, method: str, sc: Scenario) -> Optional[int]:
        if not method.endswith("_b"):
            return None
        for key in (f"{method}@{sc.m},{sc.sparsity}", f"{sc.m},{sc.sparsity}", method):
            if key in self.bins:
                return int(self.bins[key])
        return default_bins(sc.m, sc.sparsity)

    def response_spec(self) -> ResponseSpec:
        return ResponseSpec(self.response, self.w, self.alpha, self.sigma_eps2, self.f_id)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a flat TOML file of ``ExperimentConfig`` fields."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib

    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise InvalidArgument(f"{path}: unknown config keys {', '.join(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**raw)


# --- metrics -----------------------------------------------------------------


METRIC_FIELDS = ("pred", "beta_rmse", "imp_rmse")


@dataclass
class MetricsRow:
    scenario: str
    method: str
    replicate: int
    pred: float = math.nan  # RMSE (continuous) or misclassification rate (binary)
    beta_rmse: float = math.nan
    imp_rmse: float = math.nan
    k: Optional[int] = None
    M: int = 1
    status: str = "ok"
    wall_time: float = 0.0


def imputation_rmse(truth, completed, mask) -> float:
    """Mean over completions of the RMSE at originally missing cells."""
    missing = ~np.asarray(mask, dtype=bool)
    if not missing.any():
        return 0.0
    truth = np.asarray(truth, dtype=float)
    sets = completed if isinstance(completed, (list, tuple)) else [completed]
    return float(np.mean([math.sqrt(np.mean((np.asarray(z)[missing] - truth[missing]) ** 2)) for z in sets]))


def beta_rmse(beta_hat, beta_true) -> float:
    return float(math.sqrt(np.mean((np.asarray(beta_hat) - np.asarray(beta_true)) ** 2)))


def prediction_metric(pred, target, binary: bool) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if binary:
        return float(np.mean((pred >= 0.5).astype(float) != target))
    return float(math.sqrt(np.mean((pred - target) ** 2)))


def compute_metrics(
    truth,
    completed,
    mask=None,
    beta_true=None,
    model=None,
    test_idx=None,
    grid: Optional[Grid] = None,
    target=None,
    binary: bool = False,
) -> dict:
    """Imputation, coefficient and prediction metrics for one method run.

    ``truth=None`` (real data) omits the imputation metric; ``model`` is a
    pooled fit whose members were fitted on the completions' training rows.
    """
    out = {name: math.nan for name in METRIC_FIELDS}
    sets = completed if isinstance(completed, (list, tuple)) else [completed]
    if truth is not None and mask is not None:
        out["imp_rmse"] = imputation_rmse(truth, sets, mask)
    if model is not None:
        bh = model.beta_hat
        if beta_true is not None and bh is not None:
            out["beta_rmse"] = beta_rmse(bh, beta_true)
        if test_idx is not None and target is not None:
            preds = np.mean(
                [sofr.predict(mdl, np.asarray(z)[test_idx], grid) for mdl, z in zip(model.models, sets)], axis=0
            )
            out["pred"] = prediction_metric(preds, target, binary)
    return out


def fitter_for(kind: str, opts: Optional[sofr.SofrOptions] = None):
    if kind == "linear-scalar":
        return lambda X, y, g: sofr.fit_linear_sofr(X, y, g, opts)
    if kind == "linear-binary":
        return lambda X, y, g: sofr.fit_logistic_sofr(X, y, g, opts)
    binary = kind.endswith("binary")
    return lambda X, y, g: sofr.fit_cam(X, y, g, opts, binary=binary)


# --- experiment loop ----------------------------------------------------------


def replicate_seeds(root: int, scenario_index: int, r: int) -> dict:
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=(int(scenario_index), int(r)))
    data, split, methods = (int(x) for x in ss.generate_state(3))
    return {"data": data, "split": split, "methods": methods}


def train_test_split(n: int, fraction: float, seed: int):
    n_train = int(round(fraction * n))
    if not 1 <= n_train < n:
        raise InvalidArgument("train/test split leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class ReplicateOutput:
    rows: list
    artifacts: dict
    completed: dict = field(default_factory=dict)  # method -> completed sets
    data: Optional[GeneratedDataset] = None


def _method_seed(base: int, method: str) -> int:
    return int(np.random.SeedSequence([base, METHOD_NAMES.index(method)]).generate_state(1)[0])


def _run_method(name, d: GeneratedDataset, task, train, test, cfg, sc, seeds, fitter, forest):
    k = cfg.bins_for(name, sc)
    kw = {"forest": forest}
    if name in cfg.imputations:
        kw["M"] = int(cfg.imputations[name])
    spec = parse_method(name, k=k, **kw)
    res = impute(task, spec, seed=_method_seed(seeds["methods"], name))
    sets = list(res.completed)
    y_train = d.response[train]
    pooled = pool([z[train] for z in sets], lambda X, y: fitter(X, y, d.grid), y=y_train)
    binary = sc.response.endswith("binary")
    target = d.response[test] if binary else d.signal[test]
    met = compute_metrics(d.truth, sets, d.mask, d.beta_true, pooled, test, d.grid, target, binary)
    return spec, res, pooled, met


def run_replicate(
    cfg: ExperimentConfig, scenario_index: int, r: int, keep_artifacts: bool = False, keep_completed: bool = False
) -> ReplicateOutput:
    sc = cfg.scenarios[scenario_index]
    seeds = replicate_seeds(cfg.seed, scenario_index, r)
    grid = make_grid(sc.m)
    d = generate(sc.n, grid, SparsitySpec(sc.sparsity), cfg.response_spec(), seed=seeds["data"])
    train, test = train_test_split(sc.n, cfg.train_fraction, seeds["split"])
    y_vis = d.response.copy()
    y_vis[test] = np.nan
    task = ImputationTask(d.matrix, y_vis)
    fitter = fitter_for(sc.response)
    forest = ForestParams(n_trees=cfg.n_trees)
    rows, art, kept = [], {"methods": {}}, {}
    if keep_artifacts:
        row = int(test[0])
        art.update(
            scenario=sc.label,
            replicate=r,
            grid=grid.points.tolist(),
            beta_true=None if d.beta_true is None else d.beta_true.tolist(),
            curve_row=row,
            curve_truth=d.truth[row].tolist(),
            curve_observed=np.where(d.mask[row], d.matrix.values[row], np.nan).tolist(),
        )
    for name in cfg.methods:
        t0 = time.perf_counter()
        row = MetricsRow(sc.label, name, r, k=cfg.bins_for(name, sc))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                spec, res, pooled, met = _run_method(name, d, task, train, test, cfg, sc, seeds, fitter, forest)
            row.M = spec.M
            for key, val in met.items():
                setattr(row, key, val)
            if not all(math.isfinite(v) or math.isnan(v) for v in met.values()):
                row.status = "nonfinite"
            if keep_completed:
                kept[name] = res.completed
            if keep_artifacts:
                art["methods"][name] = {
                    "beta_hat": None if pooled.beta_hat is None else pooled.beta_hat.tolist(),
                    "curve": res.mean_completed()[art["curve_row"]].tolist(),
                }
        except Exception as exc:  # isolation: one failing method never aborts the replicate
            row.status = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")[:200]
        row.wall_time = time.perf_counter() - t0
        rows.append(row)
    return ReplicateOutput(rows, art, kept, d if keep_completed else None)


def _job(args):
    cfg, si, r = args
    return run_replicate(cfg, si, r, keep_artifacts=(r == 0))


def n_workers() -> int:
    raw = os.environ.get("SPARSEFN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidArgument(f"SPARSEFN_THREADS must be an integer, got {raw!r}") from None


@dataclass
class ExperimentResult:
    rows: list
    artifacts: list  # one per scenario (replicate 0)
    seeds: dict


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
    """Run every scenario x replicate; rows are sorted by (scenario, method
    order, replicate) whatever the completion order."""
    jobs = [(cfg, si, r) for si in range(len(cfg.scenarios)) for r in range(cfg.replicates)]
    workers = n_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            outs = list(ex.map(_job, jobs))
    else:
        outs = [_job(j) for j in jobs]
    labels = [sc.label for sc in cfg.scenarios]
    order = {name: i for i, name in enumerate(cfg.methods)}
    rows = sorted(
        (row for o in outs for row in o.rows),
        key=lambda x: (labels.index(x.scenario), order[x.method], x.replicate),
    )
    artifacts = [o.artifacts for o in outs if o.artifacts.get("methods") is not None and "scenario" in o.artifacts]
    seeds = {
        f"{sc.label}/{r}": replicate_seeds(cfg.seed, si, r)
        for si, sc in enumerate(cfg.scenarios)
        for r in range(cfg.replicates)
    }
    return ExperimentResult(rows, artifacts, seeds)


# --- EHR-shaped input -------------------------------------------------------------


@dataclass(frozen=True)
class EhrData:
    dataset: SparseFunctionalDataset
    matrix: IncompleteMatrix
    n_excluded: int
    excluded_ids: tuple


def ingest_ehr(curves_csv, response_csv, grid_m: int, min_obs: int = 2) -> EhrData:
    """Load monthly measurements: integer months ``1..grid_m`` map onto an
    equally spaced grid on [0, 1] (times snap to the nearest month). Curves
    with fewer than ``min_obs`` distinct months are excluded and counted."""
    ids, curves = read_long_csv(curves_csv)
    grid = make_grid(grid_m)
    kept_ids, kept = [], []
    excluded = []
    for cid, c in zip(ids, curves):
        months = np.rint(c.times)
        if np.any(months < 1) or np.any(months > grid_m):
            raise InvalidArgument(f"{curves_csv}: curve {cid!r} has times outside months 1..{grid_m}")
        if np.unique(months).size < min_obs:
            excluded.append(cid)
            continue
        kept_ids.append(cid)
        kept.append(replace(c, times=(c.times - 1.0) / (grid_m - 1)))
    if not kept:
        raise InvalidArgument(f"{curves_csv}: no curve has {min_obs} or more observations")
    y = read_response_csv(response_csv, kept_ids) if response_csv else None
    ds = SparseFunctionalDataset(tuple(kept), response=y, ids=tuple(kept_ids))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mat = align_to_grid(ds, grid, snap=True)
    ds = mat.to_dataset(response=y, ids=tuple(kept_ids))
    return EhrData(ds, mat, len(excluded), tuple(excluded))
