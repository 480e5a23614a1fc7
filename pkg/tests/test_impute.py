import importlib
import warnings
from dataclasses import replace

import numpy as np
import pytest

from sparsefn.errors import InvalidArgument
from sparsefn.forests import ForestParams
from sparsefn.funcdata import IncompleteMatrix, make_grid
from sparsefn.impute import (
    ImputationTask,
    MethodSpec,
    chained_cycle,
    impute,
    initialize,
    missing_order,
    parse_method,
    pool,
    run_binned,
    run_mice,
    run_missforest,
)
from sparsefn.sim import MaternParams, ResponseSpec, SparsitySpec, generate, sample_gp
from sparsefn.sofr import SofrOptions, fit_linear_sofr

# the package re-exports the impute() function under the same name
imp = importlib.import_module("sparsefn.impute")
FAST = ForestParams(n_trees=20)


@pytest.fixture(scope="module")
def small():
    g = make_grid(12)
    d = generate(80, g, SparsitySpec("medium"), ResponseSpec(), seed=0)
    return d, ImputationTask(d.matrix, d.response)


def spec(name, k=None, **kw):
    kw.setdefault("forest", FAST)
    return parse_method(name, k=k, **kw)


def test_parse_method_names():
    s = parse_method("mfp_b", k=8)
    assert (s.base, s.init, s.binned, s.k, s.M) == ("missforest", "pace", True, 8, 1)
    assert s.name == "mfp_b"
    assert parse_method("mllf").M == 5
    assert parse_method("MICE").M == 5
    with pytest.raises(InvalidArgument):
        parse_method("mf_b")
    with pytest.raises(InvalidArgument):
        parse_method("knn")
    with pytest.raises(InvalidArgument):
        MethodSpec(base="mice", binned=True, k=4)


def test_mean_init_fills_column_mean():
    g = make_grid(3)
    vals = np.array([[1.0, 5.0, 0.0], [3.0, 6.0, 1.0], [np.nan, 7.0, np.nan]])
    task = ImputationTask(IncompleteMatrix(vals, ~np.isnan(vals), g))
    out = initialize(task, "mean")
    assert out[2, 0] == 2.0
    assert out[2, 2] == 0.5


def test_no_missing_is_noop():
    g = make_grid(6)
    X = sample_gp(30, g, MaternParams(), seed=1)
    task = ImputationTask(IncompleteMatrix(X, np.ones_like(X, bool), g), np.arange(30.0))
    assert np.array_equal(initialize(task), X)
    assert np.array_equal(chained_cycle(X, task, "rf", seed=0, spec=spec("mf")), X)
    res = run_missforest(task, spec("mf"))
    assert res.n_cycles_run == 0
    assert np.array_equal(res.completed[0], X)


def test_pace_init_beats_mean_init():
    g = make_grid(20)
    t = g.points
    rng = np.random.default_rng(3)
    scores = rng.standard_normal((200, 2)) * [1.5, 0.7]
    truth = scores @ np.stack([np.sqrt(2) * np.sin(np.pi * t), np.sqrt(2) * np.cos(np.pi * t)])
    noisy = truth + 0.1 * rng.standard_normal(truth.shape)
    mask = np.ones_like(truth, bool)
    for i in range(200):
        mask[i, rng.choice(20, size=15, replace=False)] = False
    task = ImputationTask(IncompleteMatrix(noisy, mask, g))

    def err(Z):
        return np.sqrt(np.mean((Z - truth)[~mask] ** 2))

    assert err(initialize(task, "pace")) < err(initialize(task, "mean"))


def test_missing_order_ascending_with_ties():
    mask = np.ones((5, 5), bool)
    mask[:3, 0] = False
    mask[:1, 2] = False
    mask[:1, 3] = False
    mask[:2, 4] = False
    assert missing_order(mask) == (2, 3, 4, 0)


def test_sweep_visits_columns_in_order(small, monkeypatch):
    _, task = small
    Z0 = initialize(task)
    seen = []
    real = imp._predict_column

    def spy(model, Xtr, ytr, Xte, spec_, rng):
        for p in range(Z0.shape[1]):
            obs = task.data.mask[:, p]
            if obs.sum() == ytr.size and np.array_equal(ytr, Z0[obs, p]):
                seen.append(p)
                break
        return real(model, Xtr, ytr, Xte, spec_, rng)

    monkeypatch.setattr(imp, "_predict_column", spy)
    chained_cycle(Z0, task, "rf", seed=0, spec=spec("mf"))
    assert tuple(seen) == task.column_order


def test_rf_recovers_duplicated_column():
    g = make_grid(4)
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 1, 200)
    X = np.stack([a, a, rng.standard_normal(200), rng.standard_normal(200)], axis=1)
    mask = np.ones_like(X, bool)
    mask[7, 1] = False
    task = ImputationTask(IncompleteMatrix(X, mask, g))
    s = spec("mf", include_response=False, forest=ForestParams(n_trees=50, mtry=3))
    out = chained_cycle(initialize(task), task, "rf", seed=0, spec=s)
    assert abs(out[7, 1] - a[7]) < 0.05


@pytest.mark.parametrize("name", ["mf", "mfp", "mice", "mllf"])
def test_observed_cells_bit_exact(small, name):
    d, task = small
    res = impute(task, spec(name, M=2, max_cycles=3))
    for Z in res.completed:
        assert not np.isnan(Z).any()
        assert np.array_equal(Z[d.mask], d.matrix.values[d.mask])


def test_response_is_untouched(small):
    d, task = small
    before = task.response.copy()
    impute(task, spec("mf", max_cycles=2))
    assert np.array_equal(task.response, before)
    assert not task.response.flags.writeable


def test_hidden_responses_are_not_exposed(small):
    d, _ = small
    y = d.response.copy()
    y[:10] = np.nan
    task = ImputationTask(d.matrix, y)
    assert task.hidden_response.sum() == 10
    res = impute(task, spec("mf", max_cycles=2))
    assert np.isnan(task.response[:10]).all()
    assert res.completed[0].shape == d.truth.shape


def test_response_column_is_used():
    g = make_grid(6)
    rng = np.random.default_rng(6)
    X = sample_gp(100, g, MaternParams(), seed=6)
    y = X[:, 2] * 3 + 0.01 * rng.standard_normal(100)
    mask = np.ones_like(X, bool)
    mask[rng.random(100) < 0.4, 2] = False
    task = ImputationTask(IncompleteMatrix(X, mask, g), y)
    with_y = run_missforest(task, spec("mf", max_cycles=2))
    without = run_missforest(task, spec("mf", max_cycles=2, include_response=False))
    assert not np.array_equal(with_y.completed[0], without.completed[0])


def test_pmm_imputes_observed_donor_values(small):
    d, task = small
    res = run_mice(task, spec("mice", M=2, max_cycles=2))
    for Z in res.completed:
        for p in range(Z.shape[1]):
            obs = d.mask[:, p]
            assert np.isin(Z[~obs, p], d.matrix.values[obs, p]).all()


def test_mice_chains_differ(small):
    _, task = small
    res = run_mice(task, spec("mice", M=5, max_cycles=2))
    distinct = {Z.tobytes() for Z in res.completed}
    assert len(distinct) >= 2


def test_change_trace_finite_positive(small):
    _, task = small
    res = run_missforest(task, spec("mf", max_cycles=5))
    trace = res.convergence_trace[0]
    assert 1 <= len(trace) <= 5
    assert all(np.isfinite(v) and v > 0 for v in trace)
    # the run stopped at the first increase, or ran out of cycles
    if res.n_cycles_run < 5:
        assert trace[-1] > trace[-2]


def test_llf_limit_matches_rf_cycle(small):
    _, task = small
    Z0 = initialize(task)
    rf = chained_cycle(Z0, task, "rf", seed=4, spec=spec("mf"))
    llf = chained_cycle(Z0, task, "llf", seed=4, spec=spec("mllf", llf_ridge=1e12))
    assert np.abs(rf - llf).max() < 1e-3


def test_binned_identity_on_dense_data():
    g = make_grid(10)
    X = sample_gp(40, g, MaternParams(), seed=7)
    task = ImputationTask(IncompleteMatrix(X, np.ones_like(X, bool), g))
    res = run_binned(task, spec("mf_b", k=10))
    assert np.abs(res.completed[0] - X).max() < 1e-8


def test_binned_high_sparsity_runs():
    g = make_grid(32)
    d = generate(60, g, SparsitySpec("high"), ResponseSpec(), seed=8)
    task = ImputationTask(d.matrix, d.response)
    res = run_binned(task, spec("mfp_b", k=8, max_cycles=3))
    assert res.completed[0].shape == (60, 32)
    assert res.binned_completed[0].shape == (60, 8)
    assert np.isfinite(res.completed[0]).all()


def test_determinism(small):
    _, task = small
    for name, k in [("mf", None), ("mice", None), ("mf_b", 6)]:
        s = spec(name, k=k, M=2, max_cycles=3)
        a, b = impute(task, s, seed=11), impute(task, s, seed=11)
        assert all(np.array_equal(x, y) for x, y in zip(a.completed, b.completed))
        assert a.convergence_trace == b.convergence_trace


def fitter(g):
    opts = SofrOptions(n_basis=6, penalty_lambda=1e-3)
    return lambda Z, y: fit_linear_sofr(Z, y, g, opts)


def test_pool_single_set(small):
    d, task = small
    res = run_missforest(task, spec("mf", max_cycles=2))
    pooled = pool(res, fitter(d.grid), d.response)
    single = fitter(d.grid)(res.completed[0], d.response)
    assert np.array_equal(pooled.coef, single.coef)
    assert np.all(pooled.between_var == 0)
    assert np.allclose(pooled.total_var, pooled.within_var)


def test_pool_identical_and_distinct_sets(small):
    d, task = small
    Z = initialize(task)
    same = pool([Z, Z, Z], fitter(d.grid), d.response)
    assert np.allclose(same.between_var, 0, atol=1e-20)
    res = run_mice(task, spec("mice", M=5, max_cycles=2))
    mixed = pool(res, fitter(d.grid), d.response)
    assert np.all(mixed.between_var > 0)
    assert np.all(mixed.total_var > mixed.within_var)
    preds = mixed.predict(d.truth, d.grid)
    assert preds.shape == (80,)
    avg = pool(res, fitter(d.grid), d.response, average_first=True)
    assert avg.M == 1


def test_fully_missing_column_warns_in_cycle():
    g = make_grid(5)
    X = sample_gp(30, g, MaternParams(), seed=9)
    mask = np.ones_like(X, bool)
    mask[:, 2] = False
    mask[:5, 4] = False
    task = ImputationTask(IncompleteMatrix(X, mask, g))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        Z0 = initialize(task)
    with pytest.warns(UserWarning, match="no observations"):
        out = chained_cycle(Z0, task, "rf", seed=0, spec=replace(spec("mf"), include_response=False))
    assert np.array_equal(out[:, 2], Z0[:, 2])
