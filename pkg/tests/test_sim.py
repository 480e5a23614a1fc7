import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsefn.errors import InvalidArgument
from sparsefn.funcdata import make_grid
from sparsefn.sim import (
    MaternParams,
    NoiseSpec,
    ResponseSpec,
    SparsitySpec,
    generate,
    gen_response,
    matern_cov,
    sample_gp,
    sparsify,
)

# mpmath: x^nu K_nu(x) / (Gamma(nu) 2^(nu-1)) at x = sqrt(5)
MATERN_HALF = 0.52399410883182031059


def test_matern_closed_form_frozen():
    assert matern_cov(0.0, 0.5, MaternParams(0.5, 2.5, 1.0)) == pytest.approx(MATERN_HALF, abs=1e-12)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_matern_against_bessel(nu):
    from scipy.special import gamma, kv

    p = MaternParams(0.3, nu, 2.0)
    d = np.array([0.05, 0.2, 0.7])
    x = math.sqrt(2 * nu) * d / p.rho
    ref = p.sigma2 * x**nu * kv(nu, x) / (gamma(nu) * 2 ** (nu - 1))
    assert np.allclose(matern_cov(0.0, d, p), ref, rtol=1e-12)
    assert matern_cov(0.4, 0.4, p) == p.sigma2


def test_matern_rejects_unsupported_nu():
    with pytest.raises(InvalidArgument):
        MaternParams(nu=1.0)


def test_gp_seed_determinism():
    g = make_grid(10)
    a = sample_gp(5, g, MaternParams(), seed=3)
    b = sample_gp(5, g, MaternParams(), seed=3)
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 60), st.sampled_from(["medium", "high"]), st.integers(0, 1000))
def test_sparsify_exact_counts(m, level, seed):
    spec = SparsitySpec(level)
    n_mis = spec.n_missing(m)
    if m - n_mis < 2:
        with pytest.raises(InvalidArgument):
            sparsify(np.zeros((3, m)), make_grid(m), spec, seed)
        return
    x = sparsify(np.zeros((7, m)), make_grid(m), spec, seed)
    assert np.all((~x.mask).sum(axis=1) == n_mis)


def test_missing_counts_for_paper_grids():
    assert SparsitySpec("medium").n_missing(32) == 16
    assert SparsitySpec("high").n_missing(32) == 27
    assert SparsitySpec("high").n_missing(52) == 44


def test_sparsity_rules():
    with pytest.raises(InvalidArgument):
        SparsitySpec("medium", 0.4)
    with pytest.raises(InvalidArgument):
        SparsitySpec("high", 0.8)
    assert SparsitySpec("high", 0.9).missing_fraction == 0.9


def test_null_response_is_zero():
    g = make_grid(20)
    x = sample_gp(4, g, MaternParams(), seed=0)
    y = gen_response(x, g, ResponseSpec(w=0.0, sigma_eps2=0.0), seed=1)
    assert np.all(y == 0)


def test_cos_cube_constant_curve():
    g = make_grid(401)
    x = np.ones((1, g.m))
    y = gen_response(x, g, ResponseSpec("additive-scalar", sigma_eps2=0.0, f_id="cos-cube"))
    assert y[0] == pytest.approx(math.sin(1.0) + 2.5, abs=1e-5)


def test_saturated_logit_gives_all_ones():
    g = make_grid(10)
    x = sample_gp(50, g, MaternParams(), seed=0)
    y = gen_response(x, g, ResponseSpec("linear-binary", w=0.0, alpha=20.0), seed=2)
    assert np.all(y == 1)


def test_f_id_only_for_additive():
    with pytest.raises(InvalidArgument):
        ResponseSpec("linear-scalar", f_id="cos-cube")
    assert ResponseSpec("additive-binary").f_id == "sin-square"


def test_stage_streams_are_independent():
    g = make_grid(16)
    a = generate(30, g, SparsitySpec("medium"), ResponseSpec(), seed=5)
    b = generate(30, g, SparsitySpec("high"), ResponseSpec(), noise=NoiseSpec(0.1), seed=5)
    # curves and responses do not move when only the mask or noise changes
    assert np.array_equal(a.truth, b.truth)
    assert np.array_equal(a.response, b.response)
    assert a.observed.n == 30
    assert np.all(np.isnan(a.matrix.values[~a.mask]))
