import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsefn.errors import InsufficientData
from sparsefn.fpca import (
    CovSurface,
    EigenSystem,
    MeanEstimate,
    PaceOptions,
    eigen_decompose,
    epanechnikov,
    estimate_mean,
    fit_pace,
    local_linear_1d,
    pace_impute,
    pace_scores,
)
from sparsefn.funcdata import SparseCurve, SparseFunctionalDataset, make_grid
from sparsefn.sim import MaternParams, NoiseSpec, ResponseSpec, SparsitySpec, generate, matern_matrix


def rank2_system(m=41, noise=0.2):
    g = make_grid(m)
    t = g.points
    phi = np.stack([np.sqrt(2) * np.sin(np.pi * t), np.sqrt(2) * np.cos(np.pi * t)])
    mean = MeanEstimate(np.sin(2 * np.pi * t), 0.1, g)
    return EigenSystem(phi, np.array([2.0, 0.5]), mean, noise, 1.0, g)


def gaussian_conditional_mean(es, idx, x):
    """Information-form posterior mean of the scores."""
    phi = es.eigenfunctions[:, idx]
    prec = np.diag(1 / es.eigenvalues) + phi @ phi.T / es.noise_var
    return np.linalg.solve(prec, phi @ (x - es.mean.values[idx]) / es.noise_var)


def test_epanechnikov_support():
    u = np.array([-1.5, -1.0, 0.0, 0.5, 1.0])
    assert epanechnikov(u).tolist() == [0.0, 0.0, 0.75, 0.75 * 0.75, 0.0]


def test_local_linear_reproduces_lines():
    s = np.linspace(0, 1, 30)
    counts = np.full(30, 2.0)
    sums = counts * (1 + 3 * s)
    ev = np.linspace(0, 1, 11)
    assert np.allclose(local_linear_1d(ev, s, counts, sums, 0.2), 1 + 3 * ev, atol=1e-12)


def test_blup_matches_conditional_mean():
    es = rank2_system()
    rng = np.random.default_rng(0)
    for _ in range(20):
        idx = np.sort(rng.choice(es.grid.m, size=rng.integers(1, 8), replace=False))
        x = rng.standard_normal(idx.size)
        got = pace_scores(SparseCurve(es.grid.points[idx], x), es)
        ref = gaussian_conditional_mean(es, idx, x)
        assert np.allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_zero_scores_reconstruct_mean():
    es = rank2_system()
    assert np.array_equal(es.reconstruct(np.zeros(2)), es.mean.values)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 10_000))
def test_scores_linear_in_residual(a, seed):
    es = rank2_system()
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(es.grid.m, size=4, replace=False))
    t = es.grid.points[idx]
    r = rng.standard_normal(4)
    mu = es.mean.values[idx]
    base = pace_scores(SparseCurve(t, mu + r), es)
    scaled = pace_scores(SparseCurve(t, mu + a * r), es)
    assert np.allclose(scaled, a * base, atol=1e-10)


def test_more_noise_shrinks_scores():
    es = rank2_system()
    idx = np.array([3, 10, 25])
    curve = SparseCurve(es.grid.points[idx], es.mean.values[idx] + np.array([1.0, -0.5, 2.0]))
    norms = []
    for s2 in [1e-3, 0.1, 1.0, 10.0, 1e4]:
        e = EigenSystem(es.eigenfunctions, es.eigenvalues, es.mean, s2, 1.0, es.grid)
        norms.append(np.linalg.norm(pace_scores(curve, e)))
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-3


def test_eigen_error_decreases_with_components():
    g = make_grid(40)
    C = matern_matrix(g, MaternParams())
    errors = []
    for fve in [0.5, 0.9, 0.99, 0.999]:
        es = eigen_decompose(CovSurface(C, 0.0, 0.1, g), g, fve)
        approx = es.eigenfunctions.T @ np.diag(es.eigenvalues) @ es.eigenfunctions
        errors.append(np.abs(C - approx).sum() / np.abs(C).sum())
    assert all(a >= b for a, b in zip(errors, errors[1:]))
    assert errors[-1] < errors[0]


def test_eigen_sign_and_cap():
    g = make_grid(10)
    C = matern_matrix(g, MaternParams())
    es = eigen_decompose(CovSurface(C, 0.0, 0.1, g), g, 1.0)
    assert es.n_components == 9
    big = es.eigenfunctions[np.arange(9), np.argmax(np.abs(es.eigenfunctions), axis=1)]
    assert np.all(big > 0)


def test_mean_needs_ten_observations():
    ds = SparseFunctionalDataset(tuple(SparseCurve([0.1 * i], [1.0]) for i in range(5)))
    with pytest.raises(InsufficientData):
        estimate_mean(ds, make_grid(11))


def test_noise_free_dense_reconstruction():
    g = make_grid(52)
    d = generate(500, g, SparsitySpec("medium"), ResponseSpec(), noise=NoiseSpec(0.0), seed=11)
    dense = SparseFunctionalDataset(tuple(SparseCurve(g.points, row) for row in d.truth))
    # at the default FVE of 0.95 the dropped components alone cost about 0.13
    fit = fit_pace(dense, g)
    assert np.sqrt(np.mean((fit.fitted - d.truth) ** 2)) < np.sqrt(1 - 0.95)
    fit = fit_pace(dense, g, PaceOptions(fve_threshold=0.999))
    assert np.sqrt(np.mean((fit.fitted - d.truth) ** 2)) < 0.05


def test_medium_sparsity_imputation_band():
    g = make_grid(32)
    d = generate(500, g, SparsitySpec("medium"), ResponseSpec(), seed=0)
    rec = pace_impute(d.matrix, g)
    rmse = np.sqrt(np.mean((rec - d.truth)[~d.mask] ** 2))
    assert 0.1 <= rmse <= 0.4


def test_single_point_curves_still_finite():
    g = make_grid(32)
    rng = np.random.default_rng(2)
    idx = rng.integers(0, 32, size=200)
    ds = SparseFunctionalDataset(tuple(SparseCurve([g.points[i]], [rng.standard_normal()]) for i in idx))
    with pytest.warns(UserWarning, match="mean only"):
        rec = pace_impute(ds, g)
    assert rec.shape == (200, 32)
    assert np.isfinite(rec).all()


def test_fixed_bandwidths_are_respected():
    g = make_grid(20)
    d = generate(100, g, SparsitySpec("medium"), ResponseSpec(), seed=4)
    fit = fit_pace(d.observed, g, PaceOptions(bw_mean=0.2, bw_cov=0.3))
    assert fit.eigen.mean.bandwidth == 0.2
    assert fit.cov.bandwidth == 0.3
    assert fit.eigen.noise_var >= 0
