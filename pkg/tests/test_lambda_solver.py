import numpy as np
import pytest

from experiments.lambda_field.experiment import CROSS_CHECK_LQ, tanh_problem
from solvers.approx import InterpolatorSpec
from solvers.errors import InputError, PreconditionError
from solvers.grid import GridSpec, low_discrepancy_points
from solvers.lambda_solver import (
    GradientField,
    NonlinearProblem,
    closed_loop_trajectory,
    cone_violation,
    equation_residual,
    feedback_gradient_step,
    gamma_map,
    lambda_fixed_point,
    minimize_hamiltonian,
    policy_style_iteration,
    recover_value,
)
from solvers.lqr import LqProblem, solve_riccati
from solvers.splitting import SplitIterate
from tests.conftest import SCALAR_P

LINEAR = InterpolatorSpec(kind="polynomial", degree=1, include_constant=False, regularization=1e-12)


def constant_action(value: float):
    return lambda x: np.full(np.shape(x)[:-1] + (1,), value)


def test_tanh_certificate():
    certificate = tanh_problem(3.0).certificate()
    assert certificate.passed
    assert certificate.varpi == pytest.approx(0.469, abs=1e-3)
    assert certificate.nu == pytest.approx(0.591, abs=1e-3)


def test_tanh_declared_constants_hold():
    points = np.linspace(-3.0, 3.0, 61)[:, None]
    assert tanh_problem(3.0).spot_check(points) == []


def test_spot_check_flags_wrong_growth_bound():
    p = tanh_problem(3.0)
    understated = p.model_copy(update={"gamma": 0.1})
    problems = understated.spot_check(np.linspace(-1.0, 1.0, 11)[:, None])
    assert any("gamma" in problem for problem in problems)


def test_matches_riccati_solution_for_lq():
    P, trace = solve_riccati(CROSS_CHECK_LQ, np.zeros((2, 2)), tol=1e-13, max_iter=500)
    assert trace.converged
    p = NonlinearProblem.from_lq(CROSS_CHECK_LQ)
    assert p.certificate().threshold == pytest.approx(2.6937, abs=1e-3)

    points = GridSpec.cube(-1.0, 1.0, 10, 2).points()
    lam0 = GradientField(points=points, values=np.zeros_like(points), interpolator=LINEAR)
    lam, trace = lambda_fixed_point(p, lam0, tol=1e-10, max_iter=200)
    assert trace.converged
    exact = points @ P.T
    error = np.max(np.linalg.norm(lam(points) - exact, axis=-1))
    assert error <= 1e-4 * np.max(np.linalg.norm(exact, axis=-1))


def test_gamma_map_preserves_cone():
    p = NonlinearProblem.from_lq(CROSS_CHECK_LQ)
    certificate = p.certificate()
    assert certificate.varpi == pytest.approx(0.3180, abs=1e-3)
    grid_points = GridSpec.cube(-1.0, 1.0, 5, 2).points()
    lam = GradientField.from_function(grid_points, lambda x: 0.5 * certificate.varpi * x, interpolator=LINEAR)
    x = low_discrepancy_points((-1.0, -1.0), (1.0, 1.0), 1000, seed=0)
    values = gamma_map(p, lam, x)
    assert values.shape == (1000, 2)
    norms = np.linalg.norm(values, axis=-1)
    assert np.all(norms <= certificate.varpi * np.linalg.norm(x, axis=-1) + 1e-6)


def test_gamma_map_single_point_shape():
    p = NonlinearProblem.from_lq(CROSS_CHECK_LQ)
    lam = GradientField.from_function(GridSpec.cube(-1.0, 1.0, 5, 2).points(), lambda x: 0.0 * x, interpolator=LINEAR)
    assert gamma_map(p, lam, np.array([0.5, -0.5])).shape == (2,)
    np.testing.assert_allclose(gamma_map(p, lam, np.zeros(2)), np.zeros(2), atol=1e-14)


def test_gamma_map_requires_integrability():
    lam = GradientField.from_function(np.linspace(-1.0, 1.0, 5)[:, None], lambda x: 0.0 * x, interpolator=LINEAR)
    with pytest.raises(PreconditionError, match="discount"):
        gamma_map(tanh_problem(0.3), lam, np.array([0.5]))


def test_tanh_fixed_point_solves_the_equation():
    p = tanh_problem(3.0)
    points = GridSpec.cube(-1.0, 1.0, 21, 1).points()
    interpolator = InterpolatorSpec(kind="polynomial", degree=9, include_constant=False, regularization=1e-10)
    lam0 = GradientField(points=points, values=np.zeros_like(points), interpolator=interpolator)
    lam, trace = lambda_fixed_point(p, lam0, tol=1e-8, max_iter=200)
    assert trace.converged
    inner = np.linspace(-0.9, 0.9, 37)[:, None]
    assert equation_residual(p, lam, inner) < 1e-4
    certificate = p.certificate()
    growth, _ = cone_violation(lam, inner, certificate.varpi, certificate.nu)
    assert growth <= 1e-6


def test_fixed_point_rejects_failed_certificate():
    points = np.linspace(-1.0, 1.0, 5)[:, None]
    lam0 = GradientField(points=points, values=np.zeros_like(points), interpolator=LINEAR)
    with pytest.raises(PreconditionError, match="certificate"):
        lambda_fixed_point(tanh_problem(1.0), lam0)


def test_fixed_point_rejects_start_outside_cone():
    points = np.linspace(-1.0, 1.0, 5)[:, None]
    lam0 = GradientField.from_function(points, lambda x: 10.0 * x, interpolator=LINEAR)
    with pytest.raises(PreconditionError, match="cone"):
        lambda_fixed_point(tanh_problem(3.0), lam0)


def test_transport_backend_needs_grid():
    points = np.linspace(-1.0, 1.0, 5)[:, None]
    lam0 = GradientField(points=points, values=np.zeros_like(points), interpolator=LINEAR)
    with pytest.raises(InputError, match="grid"):
        lambda_fixed_point(tanh_problem(3.0), lam0, backend="transport")


def test_transport_backend_agrees_with_gamma_backend_through_origin():
    P, _ = solve_riccati(CROSS_CHECK_LQ, np.zeros((2, 2)), tol=1e-13, max_iter=500)
    p = NonlinearProblem.from_lq(CROSS_CHECK_LQ)
    # Odd node count: the origin, where the closed-loop drift vanishes, is a node.
    grid = GridSpec.cube(-1.0, 1.0, 11, 2)
    points = grid.points()
    lam0 = GradientField(points=points, values=np.zeros_like(points), interpolator=LINEAR)

    by_gamma, gamma_trace = lambda_fixed_point(p, lam0, tol=1e-10)
    by_transport, transport_trace = lambda_fixed_point(
        p, lam0, tol=1e-8, backend="transport", grid=grid
    )
    assert gamma_trace.converged
    assert transport_trace.converged
    assert np.max(np.abs(by_transport(points) - by_gamma(points))) <= 1e-3
    np.testing.assert_allclose(by_transport(points), points @ P.T, atol=1e-4)


@pytest.mark.parametrize("slope", [0.0, 0.3])
def test_transport_backend_scalar_box_through_origin(scalar_lq, slope):
    p = NonlinearProblem.from_lq(scalar_lq)
    grid = GridSpec(lo=(-1.0,), hi=(1.0,), nodes=(21,))
    points = grid.points()
    lam0 = GradientField(points=points, values=slope * points, interpolator=LINEAR)
    lam, trace = lambda_fixed_point(p, lam0, tol=1e-8, backend="transport", grid=grid)
    assert trace.converged
    np.testing.assert_allclose(lam(points), SCALAR_P * points, atol=1e-6)


def test_cone_violation_inside_and_outside():
    points = np.linspace(-1.0, 1.0, 9)[:, None]
    growth, slope = cone_violation(lambda x: 0.5 * x, points, varpi=1.0, nu=1.0)
    assert growth <= 0.0 and slope < 0.0
    growth, slope = cone_violation(lambda x: 2.0 * x, points, varpi=1.0, nu=1.0)
    assert growth == pytest.approx(1.0)
    assert slope == pytest.approx(1.0)


def test_equation_residual_vanishes_for_exact_lq_gradient(scalar_lq):
    p = NonlinearProblem.from_lq(scalar_lq)
    points = np.linspace(-2.0, 2.0, 9)[:, None]
    assert equation_residual(p, lambda x: SCALAR_P * x, points) < 1e-8
    assert equation_residual(p, lambda x: 2.0 * SCALAR_P * x, points) > 0.1


def test_hamiltonian_minimizer_quadratic():
    p = NonlinearProblem.from_lq(LqProblem.scalar(n=2.0, alpha=3.0))
    np.testing.assert_allclose(minimize_hamiltonian(p, np.array([[1.0], [-4.0]])), [[-0.5], [2.0]])


def custom_cost_problem() -> NonlinearProblem:
    return NonlinearProblem(
        drift=lambda x: 0.0 * x,
        drift_jacobian=lambda x: np.zeros(x.shape + (1,)),
        gamma=0.0,
        B=[[0.0]],
        N=[[1.0]],
        cost_gradient=lambda x: x,
        m_bound=1.0,
        alpha=3.0,
        action_cost=lambda a: np.sum((a - 1.0) ** 2, axis=-1),
        action_cost_gradient=lambda a: 2.0 * (a - 1.0),
    )


def test_hamiltonian_minimizer_custom_cost():
    a = minimize_hamiltonian(custom_cost_problem(), np.array([[0.5], [-3.0]]))
    np.testing.assert_allclose(a, np.ones((2, 1)), atol=1e-8)


def test_feedback_gradient_step_custom_cost():
    a = feedback_gradient_step(custom_cost_problem(), constant_action(0.0), lambda x: x, np.array([[0.2]]))
    np.testing.assert_allclose(a, [[1.0]], atol=1e-8)


def test_feedback_gradient_step_reaches_quadratic_minimizer(scalar_lq):
    p = NonlinearProblem.from_lq(scalar_lq)
    a = feedback_gradient_step(p, constant_action(0.7), lambda x: SCALAR_P * x, np.array([[1.0]]))
    np.testing.assert_allclose(a, [[-SCALAR_P]], atol=1e-8)


def test_recover_value_for_lq(scalar_lq):
    p = NonlinearProblem.from_lq(scalar_lq)
    u = recover_value(p, lambda x: SCALAR_P * x, lambda x: -SCALAR_P * x, np.array([[2.0], [-1.0]]))
    np.testing.assert_allclose(u, [2.0 * SCALAR_P, 0.5 * SCALAR_P], rtol=1e-10)


def test_recover_value_needs_state_cost():
    with pytest.raises(InputError):
        recover_value(custom_cost_problem(), lambda x: x, constant_action(1.0), np.array([[0.0]]))


def test_policy_style_iteration_recovers_lq_value(scalar_lq):
    p = NonlinearProblem.from_lq(scalar_lq)
    grid = GridSpec(lo=(0.5,), hi=(1.5,), nodes=(81,))
    step = policy_style_iteration(p, lambda x: -SCALAR_P * x, SplitIterate.zeros(grid), interpolator=LINEAR)
    assert step.trace.converged
    x = grid.points()[:, 0]
    # Away from the inflow end the boundary closure has decayed.
    far = x >= 1.2
    np.testing.assert_allclose(step.u.values[far, 0], 0.5 * SCALAR_P * x[far] ** 2, atol=1e-4)
    np.testing.assert_allclose(step.lam_values[far, 0], SCALAR_P * x[far], atol=1e-4)
    np.testing.assert_allclose(step.a_next.values[far, 0], -SCALAR_P * x[far], atol=1e-4)


def test_policy_style_iteration_constant_cost():
    p = NonlinearProblem(
        drift=lambda x: -np.ones_like(x),
        drift_jacobian=lambda x: np.zeros(x.shape + (1,)),
        gamma=0.0,
        B=[[1.0]],
        N=[[1.0]],
        cost_gradient=lambda x: 0.0 * x,
        m_bound=0.0,
        alpha=4.0,
        state_cost=lambda x: np.full(x.shape[:-1], 2.0),
    )
    grid = GridSpec(lo=(0.0,), hi=(1.0,), nodes=(11,))
    step = policy_style_iteration(p, constant_action(0.0), SplitIterate.zeros(grid), interpolator=LINEAR)
    np.testing.assert_allclose(step.u.values[:, 0], 0.5, atol=1e-12)
    np.testing.assert_allclose(step.lam_values[:, 0], 0.0, atol=1e-10)


def test_closed_loop_trajectory_decays_under_optimal_feedback(scalar_lq):
    p = NonlinearProblem.from_lq(scalar_lq)
    trajectory = closed_loop_trajectory(p, lambda y: SCALAR_P * y, np.array([1.0]), duration=1.0)
    assert trajectory.times[-1] == pytest.approx(1.0)
    assert trajectory.final[0] == pytest.approx(np.exp(-SCALAR_P), rel=1e-8)
