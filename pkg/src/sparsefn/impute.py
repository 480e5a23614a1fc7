"""Chained imputation of grid-aligned sparse curves.

Methods share one engine: initialize missing cells (column means or PACE),
then sweep the columns in ascending order of missing count, refitting a
per-column model (random forest, local linear forest or predictive mean
matching) on the rows where that column was observed.

Hidden responses (NaN entries of the response, e.g. held-out rows) are
treated as missing cells of the auxiliary response column: they are filled
internally every cycle so those rows still have a predictor value, but they
are never returned.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import sofr
from .errors import InvalidArgument, NumericFailure
from .fpca import PaceOptions, pace_impute
from .forests import ForestParams, fit_forest, forest_predict, llf_predict
from .funcdata import BinSpec, IncompleteMatrix, bin_dense, bin_matrix, interpolate_row, make_bins

BASES = ("pace", "mice", "missforest", "mllf")
METHOD_NAMES = ("pace", "mice", "mf", "mllf", "mfp", "mllfp", "mf_b", "mllf_b", "mfp_b", "mllfp_b")


@dataclass(frozen=True)
class MethodSpec:
    base: str = "missforest"
    init: str = "mean"
    binned: bool = False
    k: Optional[int] = None
    M: Optional[int] = None
    max_cycles: int = 10
    include_response: bool = True
    forest: ForestParams = field(default_factory=ForestParams)
    llf_ridge: Optional[float] = None
    pace: PaceOptions = field(default_factory=PaceOptions)
    n_donors: int = 5

    def __post_init__(self):
        if self.base not in BASES:
            raise InvalidArgument(f"unknown base method {self.base!r}")
        if self.init not in ("mean", "pace"):
            raise InvalidArgument(f"unknown initialization {self.init!r}")
        if self.M is None:
            object.__setattr__(self, "M", 5 if self.base in ("mice", "mllf") else 1)
        if self.M < 1 or self.max_cycles < 1:
            raise InvalidArgument("M and max_cycles must be >= 1")
        if self.binned and self.base not in ("missforest", "mllf"):
            raise InvalidArgument("binning applies to missforest and mllf bases only")
        if self.binned and (self.k is None or self.k < 2):
            raise InvalidArgument("binned methods need k >= 2")

    @property
    def name(self) -> str:
        if self.base in ("pace", "mice"):
            return self.base
        s = {"missforest": "mf", "mllf": "mllf"}[self.base]
        if self.init == "pace":
            s += "p"
        return s + "_b" if self.binned else s


def parse_method(name: str, k: Optional[int] = None, **kw) -> MethodSpec:
    """``MethodSpec`` for a CLI method name such as ``mfp_b``."""
    key = name.strip().lower()
    if key not in METHOD_NAMES:
        raise InvalidArgument(f"unknown method {name!r}; expected one of {', '.join(METHOD_NAMES)}")
    if key in ("pace", "mice"):
        return MethodSpec(base=key, **kw)
    binned = key.endswith("_b")
    stem = key[:-2] if binned else key
    base = "missforest" if stem.startswith("mf") else "mllf"
    init = "pace" if stem.endswith("p") else "mean"
    if binned and k is None:
        raise InvalidArgument(f"{name} needs a bin count k")
    return MethodSpec(base=base, init=init, binned=binned, k=k if binned else None, **kw)


@dataclass(frozen=True)
class ImputationTask:
    data: IncompleteMatrix
    response: Optional[np.ndarray] = None
    column_order: tuple = ()

    def __post_init__(self):
        if self.response is not None:
            y = np.array(self.response, dtype=float)
            if y.shape != (self.data.shape[0],):
                raise InvalidArgument("response length must equal the number of rows")
            if np.isinf(y).any():
                raise InvalidArgument("response must be finite (NaN marks hidden entries)")
            if np.isnan(y).all():
                raise InvalidArgument("response has no visible entries")
            y.setflags(write=False)
            object.__setattr__(self, "response", y)
        object.__setattr__(self, "column_order", missing_order(self.data.mask))

    @property
    def hidden_response(self) -> np.ndarray:
        if self.response is None:
            return np.zeros(self.data.shape[0], dtype=bool)
        return np.isnan(self.response)


def missing_order(mask: np.ndarray) -> tuple:
    """Columns with at least one missing cell, ascending by missing count
    (stable, so ties keep index order)."""
    miss = (~mask).sum(axis=0)
    order = np.argsort(miss, kind="stable")
    return tuple(int(j) for j in order if miss[j] > 0)


@dataclass(frozen=True)
class ImputationResult:
    completed: tuple  # M dense (n, m) matrices on the original grid
    n_cycles_run: int
    convergence_trace: tuple  # per run, the change statistic of each cycle
    method: MethodSpec
    seed: int
    column_order: tuple = ()
    binned_completed: Optional[tuple] = None

    @property
    def M(self) -> int:
        return len(self.completed)

    def mean_completed(self) -> np.ndarray:
        return np.mean(self.completed, axis=0)


# --- initialization -----------------------------------------------------------


def _fill_empty_columns(values: np.ndarray, empty: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Linear interpolation across columns for columns with no data at all."""
    if not empty.any():
        return values
    have = ~empty
    if not have.any():
        raise InvalidArgument("matrix has no observed entries")
    out = values.copy()
    for i in range(out.shape[0]):
        out[i, empty] = np.interp(points[empty], points[have], out[i, have])
    return out


def initialize(task: ImputationTask, init_kind: str = "mean", pace_opts: Optional[PaceOptions] = None) -> np.ndarray:
    """Fill every missing cell: column means, or PACE reconstructions.

    Observed cells are kept. A fully missing column takes linear
    interpolation of neighbouring column means under mean initialization.
    """
    x = task.data
    mask = x.mask
    out = x.filled(0.0)
    if init_kind == "mean":
        counts = mask.sum(axis=0)
        means = np.divide(out.sum(axis=0), counts, out=np.zeros(x.shape[1]), where=counts > 0)
        empty = counts == 0
        if empty.any():
            warnings.warn(f"{int(empty.sum())} columns have no observations; interpolating neighbours", stacklevel=2)
            means = _fill_empty_columns(means[None, :], empty, x.grid.points)[0]
        return np.where(mask, out, means[None, :])
    if init_kind == "pace":
        recon = pace_impute(x, x.grid, pace_opts)
        return np.where(mask, out, recon)
    raise InvalidArgument(f"unknown initialization {init_kind!r}")


# --- column models --------------------------------------------------------------


def _model_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def _rf_column(Xtr, ytr, Xte, spec: MethodSpec, seed: int) -> np.ndarray:
    f = fit_forest(Xtr, ytr, replace(spec.forest, seed=seed))
    return np.atleast_1d(forest_predict(f, Xte))


def _llf_column(Xtr, ytr, Xte, spec: MethodSpec, seed: int) -> np.ndarray:
    f = fit_forest(Xtr, ytr, replace(spec.forest, seed=seed))
    return np.atleast_1d(llf_predict(f, Xtr, ytr, Xte, ridge=spec.llf_ridge))


def _bayes_draw(Xtr, ytr, rng: np.random.Generator):
    """Posterior draw for Bayesian linear regression with a small ridge.

    Returns ``(beta_hat, beta_star)``. The ridge starts at 1e-6 of the mean
    diagonal and grows tenfold while the system is ill-conditioned.
    """
    n, p = Xtr.shape
    A = Xtr.T @ Xtr
    scale = max(float(np.mean(np.diag(A))), 1e-12)
    kappa = 1e-6
    while True:
        Ak = A + kappa * scale * np.eye(p)
        try:
            L = np.linalg.cholesky(Ak)
            if np.linalg.cond(Ak) < 1e12:
                break
        except np.linalg.LinAlgError:
            pass
        kappa *= 10
        if kappa > 1e2:
            raise NumericFailure("regression design is degenerate even with a large ridge")
    if kappa > 1e-6:
        warnings.warn(f"collinear predictors; PMM ridge raised to {kappa:g}", stacklevel=3)
    V = np.linalg.inv(Ak)
    beta = V @ (Xtr.T @ ytr)
    resid = ytr - Xtr @ beta
    dof = max(n - p, 1)
    sigma2 = float(resid @ resid) / rng.chisquare(dof)
    Lv = np.linalg.cholesky(V + 1e-14 * np.eye(p))
    beta_star = beta + np.sqrt(sigma2) * (Lv @ rng.standard_normal(p))
    return beta, beta_star


def _pmm_column(Xtr, ytr, Xte, spec: MethodSpec, rng: np.random.Generator) -> np.ndarray:
    Xtr1 = np.hstack([np.ones((Xtr.shape[0], 1)), Xtr])
    Xte1 = np.hstack([np.ones((Xte.shape[0], 1)), Xte])
    beta, beta_star = _bayes_draw(Xtr1, ytr, rng)
    donors_mean = Xtr1 @ beta
    target = Xte1 @ beta_star
    d = min(spec.n_donors, ytr.size)
    dist = np.abs(target[:, None] - donors_mean[None, :])
    # stable partition keeps ties deterministic
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :d]
    pick = rng.integers(0, d, size=Xte.shape[0])
    return ytr[nearest[np.arange(Xte.shape[0]), pick]]


# --- one chained sweep ------------------------------------------------------------


def _predict_column(model, Xtr, ytr, Xte, spec, rng):
    if model == "rf":
        return _rf_column(Xtr, ytr, Xte, spec, _model_seed(rng))
    if model == "llf":
        return _llf_column(Xtr, ytr, Xte, spec, _model_seed(rng))
    if model == "pmm":
        return _pmm_column(Xtr, ytr, Xte, spec, rng)
    raise InvalidArgument(f"unknown column model {model!r}")


def _sweep(Z, task, model, rng, spec, aux, mask, order):
    Z = np.array(Z, dtype=float, copy=True)
    use_resp = aux is not None
    for p in order:
        obs = mask[:, p]
        if not obs.any():
            warnings.warn(f"column {p} has no observations; keeping its initialization", stacklevel=3)
            continue
        if obs.all():
            continue
        others = np.delete(Z, p, axis=1)
        if use_resp:
            others = np.hstack([others, aux[:, None]])
        Z[~obs, p] = _predict_column(model, others[obs], Z[obs, p], others[~obs], spec, rng)
    if use_resp:
        hidden = task.hidden_response
        if hidden.any():
            aux = aux.copy()
            aux[hidden] = _predict_column(model, Z[~hidden], aux[~hidden], Z[hidden], spec, rng)
    return Z, aux


def chained_cycle(
    completed: np.ndarray,
    task: ImputationTask,
    model: str,
    seed=None,
    spec: Optional[MethodSpec] = None,
) -> np.ndarray:
    """One sweep over the columns with missing cells, in ``task.column_order``.

    Each column is regressed (``model`` in rf, llf, pmm) on all other
    current columns plus the response when ``spec.include_response``, using
    the rows where it was observed; only its missing cells are rewritten.
    """
    spec = spec or MethodSpec()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if np.isnan(completed).any():
        raise InvalidArgument("chained_cycle needs a fully initialized matrix")
    aux = _initial_aux(task) if spec.include_response and task.response is not None else None
    return _sweep(completed, task, model, rng, spec, aux, task.data.mask, task.column_order)[0]


def _initial_aux(task: ImputationTask) -> np.ndarray:
    y = np.array(task.response, dtype=float)
    hidden = np.isnan(y)
    y[hidden] = y[~hidden].mean()
    return y


def _change(new: np.ndarray, old: np.ndarray, missing: np.ndarray) -> float:
    num = float(np.sum((new[missing] - old[missing]) ** 2))
    den = float(np.sum(new[missing] ** 2))
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return num / den


# --- drivers ------------------------------------------------------------------


def _run_chain(Z0, task, spec, model, rng, mask, order, stop_rule):
    """Cycle until the stopping rule fires; returns (matrix, cycles, trace)."""
    use_resp = spec.include_response and task.response is not None
    aux = _initial_aux(task) if use_resp else None
    missing = ~mask
    trace = []
    if not missing.any():
        return Z0, 0, trace
    Z = Z0
    for cycle in range(1, spec.max_cycles + 1):
        new, aux = _sweep(Z, task, model, rng, spec, aux, mask, order)
        delta = _change(new, Z, missing)
        trace.append(delta)
        if stop_rule and len(trace) >= 2 and trace[-1] > trace[-2]:
            # the first increase ends the run; keep the previous iterate
            return Z, cycle, trace
        Z = new
    return Z, spec.max_cycles, trace


def _chain_seeds(seed, M):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(M)]


def _chained(task, spec, seed, model, stop_rule, Z0=None, mask=None, order=None):
    mask = task.data.mask if mask is None else mask
    order = task.column_order if order is None else order
    outs, cycles, traces = [], [], []
    for rng in _chain_seeds(seed, spec.M):
        start = Z0 if Z0 is not None else initialize(task, spec.init, spec.pace)
        Z, c, tr = _run_chain(start, task, spec, model, rng, mask, order, stop_rule)
        outs.append(Z)
        cycles.append(c)
        traces.append(tuple(tr))
    return outs, max(cycles), tuple(traces)


def _result(task, spec, seed, outs, cycles, traces, binned=None):
    for z in outs:
        z.setflags(write=False)
    return ImputationResult(
        completed=tuple(outs),
        n_cycles_run=int(cycles),
        convergence_trace=traces,
        method=spec,
        seed=int(seed),
        column_order=task.column_order,
        binned_completed=binned,
    )


def run_missforest(task: ImputationTask, spec: Optional[MethodSpec] = None, seed: int = 0) -> ImputationResult:
    """MissForest: random-forest chained cycles, stopped at the first
    increase of the change statistic."""
    spec = spec or MethodSpec(base="missforest")
    outs, c, tr = _chained(task, spec, seed, "rf", stop_rule=True)
    return _result(task, spec, seed, outs, c, tr)


def run_mllf(task: ImputationTask, spec: Optional[MethodSpec] = None, seed: int = 0) -> ImputationResult:
    """MissForest loop with local linear forest column models; M runs."""
    spec = spec or MethodSpec(base="mllf")
    outs, c, tr = _chained(task, spec, seed, "llf", stop_rule=True)
    return _result(task, spec, seed, outs, c, tr)


def run_mice(task: ImputationTask, spec: Optional[MethodSpec] = None, seed: int = 0) -> ImputationResult:
    """MICE with predictive mean matching: M mean-initialized chains of
    ``max_cycles`` sweeps each."""
    spec = spec or MethodSpec(base="mice")
    if spec.init != "mean":
        spec = replace(spec, init="mean")
    outs, c, tr = _chained(task, spec, seed, "pmm", stop_rule=False)
    return _result(task, spec, seed, outs, c, tr)


def run_pace(task: ImputationTask, spec: Optional[MethodSpec] = None, seed: int = 0) -> ImputationResult:
    """PACE reconstructions (smoothed curves, observed cells not kept)."""
    spec = spec or MethodSpec(base="pace")
    opts = replace(spec.pace, seed=spec.pace.seed if spec.pace.seed is not None else seed)
    recon = np.array(pace_impute(task.data, task.data.grid, opts))
    return _result(task, spec, seed, [recon], 0, ((),))


def run_binned(task: ImputationTask, spec: MethodSpec, seed: int = 0, bins: Optional[BinSpec] = None) -> ImputationResult:
    """Impute at ``k`` bin representatives, then spline back to the grid.

    PACE initialization is computed on the full-resolution data and binned
    afterwards. Bins empty in every row start from neighbour interpolation
    and keep that value.
    """
    if not spec.binned:
        raise InvalidArgument("run_binned needs a binned MethodSpec")
    grid = task.data.grid
    bins = bins or make_bins(grid, spec.k)
    bx = bin_matrix(task.data, bins)
    btask = ImputationTask(bx, task.response)
    mask = bx.mask
    if spec.init == "pace":
        recon = pace_impute(task.data, grid, spec.pace)
        Z0 = np.where(mask, bx.filled(0.0), bin_dense(recon, bins))
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            Z0 = initialize(btask, "mean")
    model = "rf" if spec.base == "missforest" else "llf"
    with warnings.catch_warnings():
        # empty bins are expected at high sparsity and handled above
        warnings.filterwarnings("ignore", message="column .* has no observations")
        outs, c, tr = _chained(btask, spec, seed, model, stop_rule=True, Z0=Z0, mask=mask, order=btask.column_order)
    dense = [interpolate_row(z, bins, grid) for z in outs]
    for z in outs:
        z.setflags(write=False)
    return _result(task, spec, seed, dense, c, tr, binned=tuple(outs))


def impute(task: ImputationTask, spec: MethodSpec, seed: int = 0) -> ImputationResult:
    """Dispatch on ``spec`` to the matching driver."""
    if spec.base == "pace":
        return run_pace(task, spec, seed)
    if spec.base == "mice":
        return run_mice(task, spec, seed)
    if spec.binned:
        return run_binned(task, spec, seed)
    if spec.base == "missforest":
        return run_missforest(task, spec, seed)
    return run_mllf(task, spec, seed)


# --- pooling --------------------------------------------------------------------


def _coef_of(model) -> np.ndarray:
    if isinstance(model, sofr.FunctionalLinearModel):
        return np.asarray(model.coef, dtype=float)
    if isinstance(model, sofr.CamModel):
        return np.asarray(model.coeff, dtype=float).ravel()
    raise InvalidArgument(f"cannot pool {type(model).__name__}")


@dataclass(frozen=True)
class PooledFit:
    models: tuple
    coef: np.ndarray
    between_var: np.ndarray
    within_var: Optional[np.ndarray]
    total_var: Optional[np.ndarray]

    @property
    def M(self) -> int:
        return len(self.models)

    @property
    def beta_hat(self) -> Optional[np.ndarray]:
        if isinstance(self.models[0], sofr.FunctionalLinearModel):
            return np.mean([m.beta_hat for m in self.models], axis=0)
        return None

    def predict(self, curves, grid, labels: bool = False) -> np.ndarray:
        """Mean prediction over the M fits (probabilities for a logit link
        are averaged before thresholding)."""
        preds = np.mean([sofr.predict(m, curves, grid) for m in self.models], axis=0)
        if labels and self.models[0].link == "logit":
            return (preds >= 0.5).astype(float)
        return preds


def pool(results, fitter: Callable, y=None, average_first: bool = False) -> PooledFit:
    """Fit ``fitter(curves, y)`` on each completed set and combine.

    ``results`` is an ``ImputationResult`` or a sequence of completed
    matrices. Coefficients are averaged; the between-imputation variance and
    Rubin's total variance (within + (1 + 1/M) between) are reported when
    the fits carry a coefficient covariance. ``average_first`` fits once on
    the mean completed matrix instead.
    """
    sets = list(results.completed) if isinstance(results, ImputationResult) else [np.asarray(r) for r in results]
    if not sets:
        raise InvalidArgument("nothing to pool")
    if average_first:
        sets = [np.mean(sets, axis=0)]
    models = tuple(fitter(z, y) if y is not None else fitter(z) for z in sets)
    coefs = np.array([_coef_of(m) for m in models])
    M = len(models)
    mean = coefs.mean(axis=0)
    between = coefs.var(axis=0, ddof=1) if M > 1 else np.zeros_like(mean)
    covs = [getattr(m, "coef_cov", None) for m in models]
    if all(c is not None for c in covs):
        within = np.mean([np.diag(c) for c in covs], axis=0)
        total = within + (1 + 1 / M) * between
    else:
        within = total = None
    return PooledFit(models, mean, between, within, total)
