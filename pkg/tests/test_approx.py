import numpy as np
import pytest
from scipy import linalg

from solvers.approx import (
    BasisFamily,
    InterpolatorSpec,
    KernelSpec,
    fit_interpolant,
    fit_kernel,
    fit_parametric,
    polynomial_basis,
    predict,
    regularized_objective,
    single_layer_features,
)
from solvers.errors import InputError


def test_constant_basis_interpolates():
    model = fit_parametric(BasisFamily.constant(), [[0.0]], [2.0], gamma=0.0)
    np.testing.assert_allclose(model.coefficients, [2.0], atol=1e-12)
    assert predict(model, 5.0) == pytest.approx(2.0)
    assert predict(model, -17.0) == pytest.approx(2.0)


def test_constant_basis_with_ridge():
    model = fit_parametric(BasisFamily.constant(), [[0.0]], [2.0], gamma=1.0)
    np.testing.assert_allclose(model.coefficients, [1.0], atol=1e-12)


def test_realizable_polynomial_fit():
    xs = np.linspace(-1.0, 1.0, 5)[:, None]
    ys = 1.0 + 2.0 * xs[:, 0] - xs[:, 0] ** 2
    model = fit_parametric(polynomial_basis(1, 2), xs, ys, gamma=0.0)
    assert model.residual_norm < 1e-10
    assert predict(model, 0.5) == pytest.approx(1.75, abs=1e-10)


def test_rank_deficient_fit_needs_regularization():
    with pytest.raises(InputError, match="regularization"):
        fit_parametric(polynomial_basis(1, 2), [[0.0], [1.0]], [0.0, 1.0], gamma=0.0)


def test_single_layer_features():
    np.testing.assert_array_equal(
        single_layer_features(np.eye(2), np.zeros(2), "relu", [1.0, -1.0]), [1.0, 0.0]
    )
    np.testing.assert_array_equal(
        single_layer_features(np.zeros((3, 2)), np.zeros(3), "tanh", [4.0, -7.0]), np.zeros(3)
    )
    np.testing.assert_allclose(
        single_layer_features(np.zeros((3, 2)), np.zeros(3), "sigmoid", [4.0, -7.0]), np.full(3, 0.5)
    )


def test_single_layer_rejects_unknown_activation():
    with pytest.raises(InputError, match="activation"):
        single_layer_features(np.eye(2), np.zeros(2), "softplus", [1.0, 1.0])


def test_single_layer_basis_fit():
    basis = BasisFamily.single_layer(W=[[1.0], [-1.0], [2.0]], b=[0.0, 0.5, -0.5], activation="tanh")
    xs = np.linspace(-1.0, 1.0, 9)[:, None]
    ys = basis(xs) @ np.array([0.5, -1.0, 2.0])
    model = fit_parametric(basis, xs, ys, gamma=0.0)
    np.testing.assert_allclose(model.coefficients, [0.5, -1.0, 2.0], atol=1e-8)


def test_kernel_single_point():
    model = fit_kernel(KernelSpec(bandwidth=1.0, regularization=1.0), [[0.0]], [1.0])
    np.testing.assert_allclose(model.coefficients, [0.5])
    assert predict(model, 0.0) == pytest.approx(0.5)


def test_kernel_interpolates_without_regularization():
    xs = np.linspace(-1.0, 1.0, 5)[:, None]
    ys = np.sin(3.0 * xs[:, 0])
    model = fit_kernel(KernelSpec(), xs, ys)
    # Median pairwise distance of the five nodes.
    assert model.bandwidth == pytest.approx(1.0)
    np.testing.assert_allclose(predict(model, xs), ys, atol=1e-8)


def test_kernel_decays_far_from_data():
    xs = np.linspace(-1.0, 1.0, 5)[:, None]
    model = fit_kernel(KernelSpec(bandwidth=1.0), xs, np.cos(xs[:, 0]))
    assert abs(predict(model, 12.0)) < 1e-6


def test_kernel_predictions_shrink_with_heavy_regularization():
    xs = np.linspace(-1.0, 1.0, 6)[:, None]
    ys = np.linspace(0.5, 2.0, 6)
    gamma = 1e6
    model = fit_kernel(KernelSpec(bandwidth=0.5, regularization=gamma), xs, ys)
    K = model.design(xs)
    bound = np.linalg.norm(ys) * np.linalg.norm(K, 2) / gamma + 1e-12
    assert np.max(np.abs(predict(model, xs))) <= bound


def test_kernel_rejects_duplicates_without_regularization():
    with pytest.raises(InputError, match="duplicate"):
        fit_kernel(KernelSpec(bandwidth=1.0), [[0.0], [0.0]], [1.0, 2.0])
    model = fit_kernel(KernelSpec(bandwidth=1.0, regularization=0.1), [[0.0], [0.0]], [1.0, 2.0])
    assert np.all(np.isfinite(model.coefficients))


def test_predict_rejects_dimension_mismatch():
    model = fit_kernel(KernelSpec(bandwidth=1.0), [[0.0, 0.0], [1.0, 0.0]], [0.0, 1.0])
    with pytest.raises(InputError):
        predict(model, [[0.0, 0.0, 0.0]])


def test_ridge_solution_is_optimal(rng):
    xs = rng.uniform(-1.0, 1.0, (12, 1))
    ys = np.sin(2.0 * xs[:, 0]) + 0.1 * rng.standard_normal(12)
    model = fit_parametric(polynomial_basis(1, 3), xs, ys, gamma=0.1)
    best = regularized_objective(model, xs, ys)
    for _ in range(100):
        direction = rng.standard_normal(model.coefficients.shape)
        direction *= 1e-3 / np.linalg.norm(direction)
        assert regularized_objective(model, xs, ys, model.coefficients + direction) > best


def test_ridge_fit_matches_cholesky_normal_equations(rng):
    xs = rng.uniform(-1.0, 1.0, (20, 2))
    ys = np.cos(xs[:, 0]) + xs[:, 1] ** 3
    basis = polynomial_basis(2, 3)
    gamma = 1e-3
    model = fit_parametric(basis, xs, ys, gamma=gamma)
    Phi = basis(xs)
    factor = linalg.cho_factor(Phi.T @ Phi + gamma * np.eye(basis.size))
    np.testing.assert_allclose(model.coefficients, linalg.cho_solve(factor, Phi.T @ ys), atol=1e-9)


def test_regularization_monotonicity(rng):
    xs = rng.uniform(-1.0, 1.0, (15, 1))
    ys = np.exp(xs[:, 0]) + 0.05 * rng.standard_normal(15)
    residuals, norms = [], []
    for gamma in (0.0, 0.01, 0.1, 1.0, 10.0):
        model = fit_parametric(polynomial_basis(1, 4), xs, ys, gamma=gamma)
        residuals.append(model.residual_norm)
        norms.append(np.linalg.norm(model.coefficients))
    assert all(b >= a - 1e-12 for a, b in zip(residuals, residuals[1:]))
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))


def test_vector_targets_fit_componentwise(rng):
    xs = rng.uniform(-1.0, 1.0, (10, 2))
    ys = np.stack([xs[:, 0] ** 2, np.sin(xs[:, 1])], axis=-1)
    basis = polynomial_basis(2, 2)
    joint = fit_parametric(basis, xs, ys, gamma=0.01)
    for column in range(2):
        single = fit_parametric(basis, xs, ys[:, column], gamma=0.01)
        np.testing.assert_allclose(joint.coefficients[:, column], single.coefficients, rtol=1e-10, atol=1e-12)


def test_interpolator_without_constant_term():
    xs = np.linspace(-1.0, 1.0, 7)[:, None]
    spec = InterpolatorSpec(kind="polynomial", degree=1, include_constant=False, regularization=0.0)
    model = fit_interpolant(spec, xs, 0.4 * xs)
    assert model.basis.size == 1
    np.testing.assert_allclose(predict(model, [[0.25]]), [[0.1]], atol=1e-12)
