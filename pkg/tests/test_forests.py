import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsefn.errors import InvalidArgument
from sparsefn.forests import (
    ForestParams,
    default_ridge,
    fit_forest,
    forest_predict,
    forest_weight_matrix,
    forest_weights,
    llf_predict,
)


def test_constant_target_predicts_constant():
    X = np.random.default_rng(0).standard_normal((40, 3))
    f = fit_forest(X, np.full(40, 2.5), ForestParams(n_trees=10))
    assert all(t.n_nodes == 1 for t in f.trees)
    assert np.allclose(forest_predict(f, X), 2.5)


def test_step_function_fits():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(200, 3))
    y = np.where(X[:, 1] > 0.4, 3.0, -1.0)
    f = fit_forest(X, y, ForestParams(n_trees=50, mtry=3, seed=2))
    assert np.mean((forest_predict(f, X) - y) ** 2) < 0.01


def test_fixed_seed_same_trees():
    rng = np.random.default_rng(2)
    X, y = rng.standard_normal((60, 4)), rng.standard_normal(60)
    a = fit_forest(X, y, ForestParams(n_trees=5, seed=9))
    b = fit_forest(X, y, ForestParams(n_trees=5, seed=9))
    for ta, tb in zip(a.trees, b.trees):
        assert np.array_equal(ta.feature, tb.feature)
        assert np.array_equal(ta.threshold, tb.threshold)


def test_leaves_respect_min_leaf():
    rng = np.random.default_rng(3)
    X, y = rng.standard_normal((150, 2)), rng.standard_normal(150)
    f = fit_forest(X, y, ForestParams(n_trees=8, min_leaf=5))
    for t in f.trees:
        sizes = t.leaf_sizes()[t.feature < 0]
        assert np.all(sizes >= 5)
        # every inbag row lands in exactly one leaf
        assert sizes.sum() == t.inbag.sum()


def test_invalid_inputs():
    with pytest.raises(InvalidArgument):
        fit_forest(np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(InvalidArgument):
        fit_forest(np.zeros((5, 2)), np.zeros(5), ForestParams(mtry=3))
    X = np.zeros((5, 2))
    X[0, 0] = np.nan
    with pytest.raises(InvalidArgument):
        fit_forest(X, np.zeros(5))


def test_tie_break_prefers_lowest_feature():
    # two identical features: the split must use feature 0
    x = np.repeat(np.arange(20.0), 1)
    X = np.stack([x, x], axis=1)
    y = (x > 9).astype(float)
    f = fit_forest(X, y, ForestParams(n_trees=1, mtry=2, bootstrap=False, min_leaf=1))
    assert f.trees[0].feature[0] == 0
    assert f.trees[0].threshold[0] == 9.5


@settings(max_examples=15, deadline=None)
@given(st.integers(10, 80), st.integers(1, 5), st.integers(0, 1000))
def test_weights_reproduce_prediction(n, p, seed):
    rng = np.random.default_rng(seed)
    X, y = rng.standard_normal((n, p)), rng.standard_normal(n)
    f = fit_forest(X, y, ForestParams(n_trees=15, seed=seed))
    Q = rng.standard_normal((6, p))
    W = forest_weight_matrix(f, Q)
    assert np.all(W >= 0) and np.all(W <= 1)
    assert np.allclose(W.sum(axis=1), 1, atol=1e-12)
    assert np.allclose(W @ y, forest_predict(f, Q), atol=1e-12)


def test_single_query_shapes():
    rng = np.random.default_rng(4)
    X, y = rng.standard_normal((30, 2)), rng.standard_normal(30)
    f = fit_forest(X, y, ForestParams(n_trees=5))
    assert forest_weights(f, X[0]).shape == (30,)
    assert np.ndim(forest_predict(f, X[0])) == 0
    assert np.ndim(llf_predict(f, X, y, X[0])) == 0


def test_llf_limit_is_forest_mean():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((100, 3))
    y = X[:, 0] ** 2 + 0.1 * rng.standard_normal(100)
    f = fit_forest(X, y, ForestParams(n_trees=30))
    Q = rng.standard_normal((10, 3))
    assert np.allclose(llf_predict(f, X, y, Q, ridge=1e12), forest_predict(f, Q), atol=1e-6)


def test_llf_corrects_linear_trend():
    rng = np.random.default_rng(6)
    X = rng.uniform(-1, 1, size=(300, 2))
    y = 4 * X[:, 0]
    f = fit_forest(X, y, ForestParams(n_trees=50))
    Q = rng.uniform(-0.9, 0.9, size=(50, 2))
    rf_err = np.abs(forest_predict(f, Q) - 4 * Q[:, 0]).mean()
    llf_err = np.abs(llf_predict(f, X, y, Q) - 4 * Q[:, 0]).mean()
    assert llf_err < rf_err


def test_default_ridge_is_scaled_trace():
    X = np.array([[0.0, 0.0], [2.0, 4.0]])
    W = np.array([[0.5, 0.5]])
    assert default_ridge(W, X)[0] == pytest.approx(0.01 * (1.0 + 4.0))


def test_negative_ridge_rejected():
    rng = np.random.default_rng(7)
    X, y = rng.standard_normal((20, 2)), rng.standard_normal(20)
    f = fit_forest(X, y, ForestParams(n_trees=3))
    with pytest.raises(InvalidArgument):
        llf_predict(f, X, y, X[:2], ridge=-1.0)


def test_singular_local_system_warns():
    # a constant column makes the zero-ridge local system singular
    rng = np.random.default_rng(8)
    X = np.hstack([rng.standard_normal((60, 1)), np.ones((60, 1))])
    y = X[:, 0]
    f = fit_forest(X, y, ForestParams(n_trees=10))
    with pytest.warns(UserWarning, match="singular"):
        out = llf_predict(f, X, y, X[:5], ridge=0.0)
    assert np.isfinite(out).all()
