import numpy as np
import pytest

from experiments.transport.experiment import manufactured_problem
from solvers.errors import DegeneracyError, InputError
from solvers.grid import GridSpec
from solvers.splitting import (
    SplitIterate,
    TransportProblem,
    amplification_estimate,
    directional_solve,
    residual_check,
    solve_transport,
    splitting_sweep,
)


def exact_sine(grid: GridSpec) -> np.ndarray:
    return np.sin(np.sum(grid.mesh(), axis=-1))


def interior_error(nodes: int, alpha: float, drift: list[float]) -> float:
    p = manufactured_problem(alpha, drift, nodes, inflow=True)
    lam, trace = solve_transport(p, SplitIterate.zeros(p.grid), tol=1e-12, max_sweeps=1000)
    assert trace.converged
    error = np.abs(lam.values[..., 0] - exact_sine(p.grid))
    return float(np.max(error[p.grid.interior_mask()]))


def bilinear_problem(nodes: int = 11) -> TransportProblem:
    G = np.array([-1.0, -2.0, -1.0])

    def exact(mesh):
        return mesh[..., 0] * mesh[..., 1] + mesh[..., 2]

    return TransportProblem(
        drift=lambda mesh: np.broadcast_to(G, mesh.shape).copy(),
        source=lambda mesh: 40.0 * exact(mesh) + mesh[..., 1] + 2.0 * mesh[..., 0] + 1.0,
        alpha=40.0,
        grid=GridSpec.cube(0.0, 1.0, nodes, 3),
        inflow=exact,
    )


def test_one_dimensional_second_order():
    coarse = interior_error(21, 2.0, [-1.0])
    fine = interior_error(41, 2.0, [-1.0])
    assert 3.0 <= coarse / fine <= 5.0


def test_one_dimensional_positive_drift_marches_from_the_right():
    coarse = interior_error(21, 2.0, [1.5])
    fine = interior_error(41, 2.0, [1.5])
    assert fine < coarse / 3.0


def test_two_dimensional_refinement():
    coarse = interior_error(21, 50.0, [-1.0, -1.0])
    fine = interior_error(41, 50.0, [-1.0, -1.0])
    assert fine < coarse / 3.0


def test_three_dimensional_bilinear_is_exact():
    p = bilinear_problem()
    lam, trace = solve_transport(p, SplitIterate.zeros(p.grid), tol=1e-13, max_sweeps=1000)
    assert trace.converged
    mesh = p.grid.mesh()
    exact = mesh[..., 0] * mesh[..., 1] + mesh[..., 2]
    assert np.max(np.abs(lam.values[..., 0] - exact)) < 1e-8
    assert residual_check(p, lam) < 1e-8


def test_sweep_does_not_depend_on_worker_count():
    p = bilinear_problem()
    start = SplitIterate(grid=p.grid, values=np.random.default_rng(5).normal(size=p.grid.shape + (1,)))
    serial = splitting_sweep(p, start, workers=1)
    parallel = splitting_sweep(p, start, workers=3)
    assert np.array_equal(serial.values, parallel.values)
    assert serial.sweep == parallel.sweep == 1


def test_zero_source_converges_to_zero(rng):
    grid = GridSpec.cube(0.0, 1.0, 11, 2)
    p = TransportProblem(
        drift=lambda mesh: np.broadcast_to([-1.0, -1.0], mesh.shape).copy(),
        source=lambda mesh: np.zeros(mesh.shape[:-1]),
        alpha=50.0,
        grid=grid,
    )
    start = SplitIterate(grid=grid, values=rng.normal(size=grid.shape + (1,)))
    lam, trace = solve_transport(p, start, tol=1e-12)
    assert trace.converged
    assert np.max(np.abs(lam.values)) < 1e-8


def test_vector_valued_source():
    grid = GridSpec.cube(0.0, 1.0, 11, 2)
    p = TransportProblem(
        drift=lambda mesh: np.broadcast_to([-1.0, -1.0], mesh.shape).copy(),
        source=lambda mesh: np.stack([np.full(mesh.shape[:-1], 3.0), np.full(mesh.shape[:-1], -6.0)], axis=-1),
        alpha=3.0,
        grid=grid,
    )
    lam, trace = solve_transport(p, SplitIterate.zeros(grid, components=2), tol=1e-12)
    assert trace.converged
    np.testing.assert_allclose(lam.values[..., 0], 1.0, atol=1e-10)
    np.testing.assert_allclose(lam.values[..., 1], -2.0, atol=1e-10)


def test_vanishing_drift_is_degenerate():
    p = TransportProblem(
        drift=lambda mesh: mesh - 0.5,
        source=lambda mesh: np.ones(mesh.shape[:-1]),
        alpha=2.0,
        grid=GridSpec.cube(0.0, 1.0, 11, 1),
    )
    with pytest.raises(DegeneracyError) as info:
        solve_transport(p, SplitIterate.zeros(p.grid))
    assert info.value.node == (5,)
    np.testing.assert_allclose(info.value.point, [0.5])


def test_affine_drift_with_linear_solution_is_exact():
    # alpha x + (1 + x) = F for lam = x and G = -(1 + x).
    alpha = 2.0
    p = TransportProblem(
        drift=lambda mesh: -(1.0 + mesh),
        source=lambda mesh: (alpha + 1.0) * mesh[..., 0] + 1.0,
        alpha=alpha,
        grid=GridSpec.cube(0.0, 1.0, 11, 1),
        inflow=lambda mesh: mesh[..., 0],
    )
    lam, trace = solve_transport(p, SplitIterate.zeros(p.grid))
    assert trace.converged
    np.testing.assert_allclose(lam.values[..., 0], p.grid.mesh()[..., 0], atol=1e-12)


@pytest.mark.parametrize("rate", [-0.5, 0.5])
def test_stagnation_point_takes_the_exact_value(rate):
    # G = rate x vanishes at the middle node; lam = x / (alpha - rate) solves it.
    alpha = 2.0
    p = TransportProblem(
        drift=lambda mesh: rate * mesh,
        source=lambda mesh: mesh[..., 0],
        alpha=alpha,
        grid=GridSpec.cube(-1.0, 1.0, 21, 1),
        inflow=lambda mesh: mesh[..., 0] / (alpha - rate),
        allow_stagnation=True,
    )
    lam, trace = solve_transport(p, SplitIterate.zeros(p.grid))
    assert trace.converged
    x = p.grid.mesh()[..., 0]
    np.testing.assert_allclose(lam.values[..., 0], x / (alpha - rate), atol=1e-12)


def test_stagnation_point_in_two_dimensions():
    # G = -x, lam = (x_1 + 2 x_2) / (alpha + 1); the splitting converges to it.
    alpha = 6.0

    def exact(mesh):
        return (mesh[..., 0] + 2.0 * mesh[..., 1]) / (alpha + 1.0)

    p = TransportProblem(
        drift=lambda mesh: -mesh,
        source=lambda mesh: mesh[..., 0] + 2.0 * mesh[..., 1],
        alpha=alpha,
        grid=GridSpec.cube(-1.0, 1.0, 11, 2),
        inflow=exact,
        allow_stagnation=True,
    )
    lam, trace = solve_transport(p, SplitIterate.zeros(p.grid), tol=1e-12)
    assert trace.converged
    np.testing.assert_allclose(lam.values[..., 0], exact(p.grid.mesh()), atol=1e-10)


def test_residual_check_is_second_order():
    residuals = []
    for nodes in (21, 41):
        p = manufactured_problem(50.0, [-1.0, -1.0], nodes, inflow=True)
        exact = SplitIterate(grid=p.grid, values=exact_sine(p.grid)[..., None])
        residuals.append(residual_check(p, exact))
    assert residuals[0] / residuals[1] == pytest.approx(4.0, rel=0.1)


def test_residual_check_flags_random_field(rng):
    p = manufactured_problem(50.0, [-1.0, -1.0], 21, inflow=True)
    noise = SplitIterate(grid=p.grid, values=rng.normal(size=p.grid.shape + (1,)))
    assert residual_check(p, noise) > 0.1


def test_sweep_changes_shrink_monotonically():
    p = manufactured_problem(50.0, [-1.0, -1.0], 21, inflow=True)
    _, trace = solve_transport(p, SplitIterate.zeros(p.grid), tol=1e-12)
    assert trace.converged
    changes = trace.distances[1:]
    for previous, current in zip(changes, changes[1:]):
        assert current <= 1.05 * previous


def test_amplification_estimate():
    p = manufactured_problem(50.0, [-1.0, -1.0], 21, inflow=True)
    # (d - 1) / d * sum |G_l| / h_l / alpha
    assert amplification_estimate(p) == pytest.approx(0.5 * 40.0 / 50.0)
    assert amplification_estimate(manufactured_problem(2.0, [-1.0], 21, inflow=True)) == 0.0


def test_directional_solve_rejects_bad_axis():
    p = manufactured_problem(2.0, [-1.0], 11, inflow=False)
    with pytest.raises(InputError):
        directional_solve(p, SplitIterate.zeros(p.grid), axis=1)


def test_drift_shape_is_checked():
    p = TransportProblem(
        drift=lambda mesh: np.zeros(mesh.shape[:-1]),
        source=lambda mesh: np.zeros(mesh.shape[:-1]),
        alpha=1.0,
        grid=GridSpec.cube(0.0, 1.0, 5, 2),
    )
    with pytest.raises(InputError, match="drift"):
        p.drift_values()


def test_iterate_shape_is_checked():
    with pytest.raises(ValueError):
        SplitIterate(grid=GridSpec.cube(0.0, 1.0, 5, 2), values=np.zeros((5, 4, 1)))
