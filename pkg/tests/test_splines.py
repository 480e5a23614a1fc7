import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsefn.splines import SplineBasis, natural_cubic_interpolate


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 20), st.integers(1, 3))
def test_partition_of_unity(n_basis, degree):
    if n_basis <= degree:
        return
    b = SplineBasis.equally_spaced(n_basis, degree)
    x = np.linspace(0, 1, 101)
    B = b.evaluate(x)
    assert B.shape == (101, n_basis)
    assert np.allclose(B.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(B >= -1e-14)


def test_basis_count_matches_knots():
    b = SplineBasis.equally_spaced(15)
    interior = b.knots.size - 2
    assert b.n_basis == interior + b.degree + 1 == 15


def test_linear_extrapolation_continues_slope():
    b = SplineBasis.equally_spaced(7, 3, -1.0, 2.0)
    coef = np.random.default_rng(0).standard_normal(7)
    f = lambda x: b.evaluate(np.atleast_1d(x)) @ coef  # noqa: E731
    d_hi = b.evaluate(np.array([2.0]), nu=1) @ coef
    assert f(2.5) == pytest.approx(f(2.0) + 0.5 * d_hi, rel=1e-10)
    assert np.all(b.evaluate(np.array([3.0]), extrapolate="zero") == 0)


def test_penalty_matches_dense_quadrature():
    b = SplineBasis.equally_spaced(9)
    x = np.linspace(0, 1, 40001)
    d2 = b.evaluate(x, nu=2)
    w = np.full(x.size, x[1] - x[0])
    w[[0, -1]] /= 2
    dense = (d2 * w[:, None]).T @ d2
    P = b.penalty_matrix(2)
    assert np.allclose(P, dense, rtol=1e-6, atol=1e-3)
    # linear functions are in the null space
    lin = np.linalg.lstsq(b.evaluate(x[::100]), x[::100], rcond=None)[0]
    assert lin @ P @ lin == pytest.approx(0, abs=1e-6)


def test_natural_cubic_reproduces_lines_and_nodes():
    x = np.array([0.0, 0.2, 0.5, 0.7, 1.0])
    y = np.stack([3 - 2 * x, np.sin(3 * x)])
    xn = np.linspace(0, 1, 23)
    out = natural_cubic_interpolate(x, y, xn)
    assert np.allclose(out[0], 3 - 2 * xn, atol=1e-12)
    assert np.allclose(natural_cubic_interpolate(x, y, x), y, atol=1e-12)


def test_natural_cubic_zero_second_derivative_at_ends():
    x = np.linspace(0, 1, 6)
    y = x**3
    h = 1e-4
    xn = np.array([0.0, h, 2 * h, 1 - 2 * h, 1 - h, 1.0])
    f = natural_cubic_interpolate(x, y, xn)
    # centred at h and 1 - h, so S'' there is O(h); x**3 itself has S''(1) = 6
    assert abs((f[0] - 2 * f[1] + f[2]) / h**2) < 0.05
    assert abs((f[3] - 2 * f[4] + f[5]) / h**2) < 0.05


def test_few_points_fall_back_to_polynomial():
    x = np.array([0.0, 0.5, 1.0])
    y = np.array([1.0, 0.0, 1.0])
    assert natural_cubic_interpolate(x, y, np.array([0.25]))[0] == pytest.approx(0.25)
