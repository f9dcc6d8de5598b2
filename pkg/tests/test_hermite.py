import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial import Polynomial
from numpy.polynomial import hermite_e

from hermfp.errors import QuadratureError
from hermfp.hermite import (
    HermiteBasis,
    SpectralField,
    eval_hermite,
    evaluate_field,
    evaluate_grid,
    evaluate_marginal,
    gauss_hermite_rule,
    hermite_table,
    hermite_transform,
    make_index_set,
    moment_functional,
)


def test_eval_hermite_known_values():
    assert eval_hermite(0, 0.7) == 1.0
    assert abs(eval_hermite(2, 1.0)) < 1e-15
    assert eval_hermite(3, 2.0) == pytest.approx(2 / math.sqrt(6), abs=1e-15)


def test_eval_hermite_matches_numpy_hermite_e():
    x = np.linspace(-5, 5, 41)
    for n in range(12):
        ref = hermite_e.hermeval(x, [0] * n + [1]) / math.sqrt(math.factorial(n))
        assert np.allclose(eval_hermite(n, x), ref, rtol=1e-12, atol=1e-12)


def test_eval_hermite_rejects_bad_arguments():
    with pytest.raises(ValueError):
        eval_hermite(-1, 0.0)
    with pytest.raises(ValueError):
        eval_hermite(2, 0.0, sigma=0.0)


@given(st.integers(1, 40), st.floats(-6, 6), st.floats(0.2, 3.0))
def test_three_term_recursion(n, x, sigma):
    lhs = x / sigma * eval_hermite(n, x, sigma)
    rhs = math.sqrt(n + 1) * eval_hermite(n + 1, x, sigma) + math.sqrt(n) * eval_hermite(n - 1, x, sigma)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


@given(st.integers(1, 30), st.floats(-4, 4), st.floats(0.3, 3.0))
def test_derivative_identity(n, x, sigma):
    h = 1e-5
    fd = (eval_hermite(n, x + h, sigma) - eval_hermite(n, x - h, sigma)) / (2 * h)
    exact = math.sqrt(n) / sigma * eval_hermite(n - 1, x, sigma)
    assert abs(fd - exact) <= 1e-6 * max(1.0, abs(exact))


def test_two_point_rule():
    x, w = gauss_hermite_rule(1)
    assert np.allclose(x, [-1.0, 1.0], atol=1e-15)
    assert np.allclose(w, [0.5, 0.5], atol=1e-15)


@pytest.mark.parametrize("sigma, expected", [(1.0, 1.0), (2.0, 4.0)])
def test_second_moment_of_rule(sigma, expected):
    x, w = gauss_hermite_rule(10, sigma)
    assert w @ x**2 == pytest.approx(expected, rel=1e-13)


def test_rule_matches_numpy():
    x, w = gauss_hermite_rule(60)
    ref_x, ref_w = hermite_e.hermegauss(61)
    assert np.allclose(x, ref_x, atol=1e-12)
    assert np.allclose(w, ref_w / ref_w.sum(), rtol=1e-10, atol=1e-300)


def test_rule_rejects_negative_degree():
    with pytest.raises(ValueError):
        gauss_hermite_rule(-1)


@given(st.integers(0, 60), st.floats(0.3, 3.0))
def test_orthonormality(d, sigma):
    x, w = gauss_hermite_rule(d + 1, sigma)
    table = hermite_table(d, x, sigma)
    gram = (table * w) @ table.T
    assert np.abs(gram - np.eye(d + 1)).max() < 1e-12


@given(st.integers(0, 40), st.integers(0, 81))
def test_quadrature_exact_on_polynomials(d_hat, degree):
    # moments of N(0, 1): (k-1)!! for even k
    if degree > 2 * d_hat + 1:
        return
    x, w = gauss_hermite_rule(d_hat)
    exact = 0.0 if degree % 2 else float(math.prod(range(degree - 1, 0, -2)))
    # relative comparison against the same sum of absolute values
    scale = w @ np.abs(x) ** degree
    assert abs(w @ x**degree - exact) <= 1e-12 * max(scale, 1.0)


def test_index_set_sizes():
    assert len(make_index_set("triangle", 2, 2)) == 6
    assert len(make_index_set("square", 1, 2)) == 4
    assert len(make_index_set("rectangle", (2, 1), 2)) == 6


def test_index_set_contents_and_errors():
    tri = make_index_set("triangle", 2, 2)
    assert {tuple(a) for a in tri.indices} == {(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (0, 2)}
    with pytest.raises(ValueError):
        make_index_set("circle", 2, 2)
    with pytest.raises(ValueError):
        make_index_set("rectangle", (2, 1), 3)
    with pytest.raises(ValueError):
        make_index_set("triangle", -1, 1)


def _plain_basis(d, sigma=1.0, dims=1):
    return HermiteBasis.create(make_index_set("triangle", d, dims), sigma)


def test_transform_of_hermite_function():
    basis = HermiteBasis.galerkin(make_index_set("triangle", 4, 1), 1.0)
    f = lambda x: eval_hermite(2, x) * np.exp(-x**2 / 4)
    field = hermite_transform(f, basis)
    assert np.allclose(field.coeffs, [0, 0, 1, 0, 0], atol=1e-14)


def test_transform_of_linear_function():
    field = hermite_transform(lambda x: x, _plain_basis(3))
    assert np.allclose(field.coeffs, [0, 1, 0, 0], atol=1e-14)


def test_transform_round_trip_cubic():
    basis = _plain_basis(3)
    field = hermite_transform(lambda x: x**3, basis)
    x = np.linspace(-3, 3, 13)
    assert np.allclose(evaluate_field(field, x), x**3, atol=1e-12)


@given(st.integers(0, 12), st.integers(1, 2), st.floats(0.4, 2.5), st.integers(0, 2**31))
def test_transform_round_trip_exact_on_polynomial_space(d, dims, sigma, seed):
    basis = HermiteBasis.galerkin(make_index_set("triangle", d, dims), sigma)
    coeffs = np.random.default_rng(seed).standard_normal(len(basis))
    field = SpectralField(basis, coeffs)

    def f(*xs):
        pts = np.stack([x.ravel() for x in xs], axis=1)
        return evaluate_field(field, pts).reshape(xs[0].shape)

    back = hermite_transform(f, basis)
    assert np.abs(back.coeffs - coeffs).max() < 1e-11 * max(1.0, np.abs(coeffs).max())


def test_evaluate_basis_functions_at_points():
    basis = _plain_basis(2, sigma=2.0)
    e0 = SpectralField(basis, [1, 0, 0])
    e1 = SpectralField(basis, [0, 1, 0])
    assert evaluate_field(e0, [0.0])[0] == 1.0
    assert evaluate_field(e1, [2.0])[0] == pytest.approx(1.0)


def test_evaluation_is_linear(rng):
    basis = _plain_basis(5, dims=2)
    a = SpectralField(basis, rng.standard_normal(len(basis)))
    b = SpectralField(basis, rng.standard_normal(len(basis)))
    pts = rng.standard_normal((7, 2))
    assert np.allclose(evaluate_field(a + 3.0 * b, pts), evaluate_field(a, pts) + 3 * evaluate_field(b, pts))


def test_grid_matches_pointwise(rng):
    basis = HermiteBasis.galerkin(make_index_set("triangle", 6, 2), (0.7, 1.3))
    field = SpectralField(basis, rng.standard_normal(len(basis)))
    xs, ys = np.linspace(-2, 2, 5), np.linspace(-1, 3, 4)
    grid = evaluate_grid(field, (xs, ys))
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    assert np.allclose(grid.ravel(), evaluate_field(field, pts), atol=1e-13)


def test_field_shape_checked():
    with pytest.raises(ValueError):
        SpectralField(_plain_basis(3), np.zeros(3))


def test_projection_error_decays():
    f = lambda x: np.exp(-x**2)
    xs = np.linspace(-4, 4, 161)
    errs = []
    for d in (4, 8, 16, 32):
        basis = HermiteBasis.galerkin(make_index_set("triangle", d, 1), 1.0)
        field = hermite_transform(f, basis, d + 40)
        errs.append(np.abs(evaluate_field(field, xs) - f(xs)).max())
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-3 * errs[0]


def test_moment_functional_on_gaussian():
    basis = HermiteBasis.galerkin(make_index_set("triangle", 30, 1), 1.0)
    dens = lambda x: np.exp(-(x - 0.4) ** 2 / 2) / math.sqrt(2 * math.pi)
    field = hermite_transform(dens, basis, 80)
    # limited by the projection error at d = 30, not by the functional
    assert moment_functional(basis) @ field.coeffs == pytest.approx(1.0, abs=1e-7)
    assert moment_functional(basis, (1,)) @ field.coeffs == pytest.approx(0.4, abs=1e-7)


def test_moment_functional_exact_on_weight_function():
    # exp(-x^2/4) is the first basis function; its integral is sqrt(4 pi)
    basis = HermiteBasis.galerkin(make_index_set("triangle", 3, 1), 1.0)
    ell = moment_functional(basis, (2,))
    assert ell[0] == pytest.approx(2 * math.sqrt(4 * math.pi), rel=1e-13)
    assert moment_functional(basis)[0] == pytest.approx(math.sqrt(4 * math.pi), rel=1e-13)


def test_marginal_of_product_density():
    basis = HermiteBasis.galerkin(make_index_set("square", 40, 2), (1.0, 1.0))
    dens = lambda x, y: np.exp(-x**2 / 2 - (y - 1) ** 2) / (math.sqrt(2 * math.pi) * math.sqrt(math.pi))
    field = hermite_transform(dens, basis, 90)
    x = np.linspace(-3, 3, 7)
    assert np.allclose(evaluate_marginal(field, x), np.exp(-x**2 / 2) / math.sqrt(2 * math.pi), atol=2e-6)


def test_weighted_basis_describe_and_weight():
    pot = Polynomial([0, 0, -0.5, 0, 0.25])
    basis = HermiteBasis.galerkin(make_index_set("triangle", 5, 1), 0.5, potential=pot)
    assert basis.gaussian_part_removed(0) == pot
    assert basis.describe()["sigma"] == [0.5]


def test_quadrature_error_type_is_hermfp_error():
    from hermfp.errors import HermfpError

    assert issubclass(QuadratureError, HermfpError)
