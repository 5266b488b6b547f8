"""
Deterministic discounted control with dynamics A(x) + Ba and running cost
F(x) + l(a), l(a) = 1/2 a*Na unless a custom action cost is given.

The value gradient lambda = Du solves the first-order system

    alpha lam - DA* lam - D lam (A - B N^-1 B* lam) = DF

and is computed as the fixed point of the map

    Gamma(lam)(x) = int_0^inf e^{-alpha s} (DF(y) + DA*(y) lam(y)) ds,
    dy/ds = A(y) - B N^-1 B* lam(y),  y(0) = x,

which contracts on the cone {|lam(x)| <= varpi |x|, |D lam| <= nu} when the
certificate passes. Fields are represented by their values on a collocation
set plus an interpolant.
"""

import logging
import math
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

from solvers import approx
from solvers.approx import FittedModel, InterpolatorSpec
from solvers.errors import InputError, PreconditionError
from solvers.grid import GridSpec
from solvers.lqr import ConvergenceCertificate, LqProblem, certificate_from_constants
from solvers.numerics import (
    OdeStepSpec,
    QuadratureSpec,
    SYMMETRY_TOL,
    Trajectory,
    as_finite_matrix,
    discounted_integral,
    golden_section_minimize,
    integrate_ode,
    spectral_norm,
)
from solvers.splitting import SplitIterate, TransportProblem, grid_gradient, solve_transport
from solvers.trace import IterationTrace, TraceRecorder
from utils import map_concurrently

logger = logging.getLogger(__name__)

PointField = Callable[[np.ndarray], np.ndarray]

ORIGIN_FLOOR = 1e-8
CONE_SLACK = 1e-6
POINT_CHUNK = 64
GradientBackend = Literal["gamma", "transport"]


class NonlinearProblem(BaseModel):
    """
    All callables act on the last axis: drift and cost_gradient map (..., n)
    to (..., n), drift_jacobian maps (..., n) to (..., n, n) with
    J[i, j] = dA_i/dx_j.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    drift: PointField
    drift_jacobian: PointField
    gamma: float = Field(ge=0)
    b_modulus: float = Field(default=0.0, ge=0)
    B: np.ndarray
    N: np.ndarray
    cost_gradient: PointField
    m_bound: float = Field(ge=0)
    alpha: float
    state_cost: PointField | None = None
    # Replaces 1/2 a*Na; maps (..., d) -> (...).
    action_cost: Callable[[np.ndarray], np.ndarray] | None = None
    action_cost_gradient: Callable[[np.ndarray], np.ndarray] | None = None

    @field_validator("B", "N", mode="before")
    @classmethod
    def _finite(cls, value, info):
        return as_finite_matrix(value, info.field_name)

    @model_validator(mode="after")
    def _check(self):
        d = self.B.shape[1]
        if self.N.shape != (d, d):
            raise InputError(f"N must be {d}x{d}, got {self.N.shape}")
        if not self.alpha > 0:
            raise InputError(f"alpha must be positive, got {self.alpha}")
        if np.max(np.abs(self.N - self.N.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(self.N))):
            raise InputError("N is not symmetric")
        if np.min(np.abs(np.linalg.eigvalsh(self.N))) <= 1e-10:
            raise InputError("N is singular")
        return self

    @classmethod
    def from_lq(cls, p: LqProblem) -> "NonlinearProblem":
        A, M = p.A, p.M
        return cls(
            drift=lambda x: x @ A.T,
            drift_jacobian=lambda x: np.broadcast_to(A, x.shape + (A.shape[0],)),
            gamma=spectral_norm(A),
            b_modulus=0.0,
            B=p.B,
            N=p.N,
            cost_gradient=lambda x: x @ M,
            m_bound=spectral_norm(M),
            alpha=p.alpha,
            state_cost=lambda x: 0.5 * np.einsum("...i,ij,...j->...", x, M, x),
        )

    @property
    def state_dim(self) -> int:
        return self.B.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    @property
    def quadratic_actions(self) -> bool:
        return self.action_cost is None

    def gain_matrix(self) -> np.ndarray:
        return self.B @ np.linalg.solve(self.N, self.B.T)

    def certificate(self) -> ConvergenceCertificate:
        return certificate_from_constants(
            gamma=self.gamma,
            b=self.b_modulus,
            m_bound=self.m_bound,
            bnb_norm=spectral_norm(self.gain_matrix()),
            alpha=self.alpha,
        )

    def running_action_cost(self, a: np.ndarray) -> np.ndarray:
        if self.action_cost is not None:
            return np.asarray(self.action_cost(a), dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", a, self.N, a)

    def action_cost_grad(self, a: np.ndarray) -> np.ndarray:
        if self.action_cost is None:
            return a @ self.N
        if self.action_cost_gradient is not None:
            return np.asarray(self.action_cost_gradient(a), dtype=float)
        return _finite_difference_gradient(self.action_cost, a, 1e-6)

    def spot_check(self, points, tol: float = 1e-9) -> list[str]:
        """
        Sample the declared growth and modulus constants at the given points.
        Returns human-readable violations (empty when all hold).
        """
        x = np.asarray(points, dtype=float)
        norms = np.linalg.norm(x, axis=-1)
        problems = []
        excess = np.linalg.norm(self.drift(x), axis=-1) - self.gamma * norms
        if np.max(excess) > tol * (1.0 + np.max(norms)):
            problems.append(f"|A(x)| exceeds gamma|x| by {np.max(excess):.3e}")
        excess = np.linalg.norm(self.cost_gradient(x), axis=-1) - self.m_bound * norms
        if np.max(excess) > tol * (1.0 + np.max(norms)):
            problems.append(f"|DF(x)| exceeds M|x| by {np.max(excess):.3e}")

        J = self.drift_jacobian(x)
        x1, x2, J1, J2 = x[:-1], x[1:], J[:-1], J[1:]
        lhs = np.linalg.norm(J1 - J2, ord=2, axis=(-2, -1))
        rhs = (
            self.b_modulus
            * np.linalg.norm(x1 - x2, axis=-1)
            / (1.0 + np.linalg.norm(x1, axis=-1) + np.linalg.norm(x2, axis=-1))
        )
        if len(lhs) and np.max(lhs - rhs) > tol:
            problems.append(f"DA modulus exceeds b by {np.max(lhs - rhs):.3e}")
        for problem in problems:
            logger.warning("spot check: %s", problem)
        return problems


def _finite_difference_gradient(fn, a: np.ndarray, step: float) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    grad = np.empty_like(a)
    for j in range(a.shape[-1]):
        e = np.zeros(a.shape[-1])
        e[j] = step
        grad[..., j] = (np.asarray(fn(a + e)) - np.asarray(fn(a - e))) / (2.0 * step)
    return grad


class SampledField(BaseModel):
    """Values of a vector field on collocation points, queryable anywhere."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    points: np.ndarray
    values: np.ndarray
    interpolator: InterpolatorSpec = Field(default_factory=InterpolatorSpec)

    _model: FittedModel = PrivateAttr()

    @model_validator(mode="after")
    def _check(self):
        if self.points.ndim != 2 or self.values.ndim != 2:
            raise InputError("points and values must be 2-d arrays")
        if len(self.points) != len(self.values):
            raise InputError(f"{len(self.points)} points but {len(self.values)} values")
        if not np.all(np.isfinite(self.values)):
            raise InputError("field values are not finite")
        return self

    def model_post_init(self, __context) -> None:
        self._model = approx.fit_interpolant(self.interpolator, self.points, self.values)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return approx.predict(self._model, x).reshape(x.shape[:-1] + (self.values.shape[1],))

    @classmethod
    def from_function(cls, points, fn: PointField, interpolator: InterpolatorSpec | None = None, **extra):
        points = np.asarray(points, dtype=float)
        return cls(
            points=points,
            values=np.asarray(fn(points), dtype=float).reshape(len(points), -1),
            interpolator=interpolator or InterpolatorSpec(),
            **extra,
        )


class GradientField(SampledField):
    # Cone bounds the field is certified to respect, when known.
    varpi: float | None = None
    nu: float | None = None


class FeedbackField(SampledField):
    pass


def closed_loop_field(p: NonlinearProblem, lam: PointField) -> PointField:
    S = p.gain_matrix()
    return lambda y: p.drift(y) - lam(y) @ S.T


def closed_loop_trajectory(
    p: NonlinearProblem, lam: PointField, x, duration: float, step_size: float | None = None
) -> Trajectory:
    """dy/ds = A(y) - B N^-1 B* lam(y) from y(0) = x."""
    if step_size is None:
        step_size = 0.02 / p.alpha
    return integrate_ode(closed_loop_field(p, lam), x, duration, OdeStepSpec(step_size=step_size))


def _integrability(p: NonlinearProblem) -> ConvergenceCertificate:
    certificate = p.certificate()
    if not certificate.alpha_ok:
        raise PreconditionError(
            f"alpha={p.alpha:.6g} fails the discount condition (threshold {certificate.threshold:.6g})"
        )
    if not p.alpha > certificate.growth_rate:
        raise PreconditionError(
            f"alpha={p.alpha:.6g} does not dominate the closed-loop growth {certificate.growth_rate:.6g}"
        )
    return certificate


def _gamma_chunk(p: NonlinearProblem, lam: PointField, x: np.ndarray, spec: QuadratureSpec) -> np.ndarray:
    trajectory = integrate_ode(
        closed_loop_field(p, lam), x, spec.horizon, OdeStepSpec(step_size=spec.step)
    )
    y = trajectory.states
    integrand = p.cost_gradient(y) + np.einsum("...ji,...j->...i", p.drift_jacobian(y), lam(y))
    return discounted_integral(trajectory.times, integrand, p.alpha)


def gamma_map(
    p: NonlinearProblem,
    lam: PointField,
    x,
    tol: float = 1e-10,
    workers: int | None = None,
) -> np.ndarray:
    """
    Gamma(lam) at the points x (shape (n,) or (P, n)).

    The horizon is chosen from the cone growth bound so the neglected tail is
    below tol. Points are processed in fixed-size chunks, possibly in parallel.
    """
    certificate = _integrability(p)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    points = np.atleast_2d(x)
    if points.shape[-1] != p.state_dim:
        raise InputError(f"points have dimension {points.shape[-1]}, expected {p.state_dim}")

    scale = (p.m_bound + p.gamma * certificate.varpi) * max(float(np.max(np.linalg.norm(points, axis=-1))), 1e-12)
    spec = QuadratureSpec.for_tolerance(
        p.alpha, scale=scale, growth_rate=certificate.growth_rate, tol=tol
    )
    chunks = [points[i : i + POINT_CHUNK] for i in range(0, len(points), POINT_CHUNK)]
    values = np.concatenate(
        map_concurrently(lambda chunk: _gamma_chunk(p, lam, chunk, spec), chunks, workers=workers)
    )
    return values[0] if single else values


def field_jacobian(lam: PointField, x: np.ndarray) -> np.ndarray:
    """Central differences with step 1e-4 (1 + |x|); shape (P, n_out, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = 1e-4 * (1.0 + np.linalg.norm(x, axis=-1))
    columns = []
    for j in range(x.shape[-1]):
        e = np.zeros_like(x)
        e[:, j] = h
        columns.append((lam(x + e) - lam(x - e)) / (2.0 * h[:, None]))
    return np.stack(columns, axis=-1)


def weighted_sup_distance(first: np.ndarray, second: np.ndarray, points: np.ndarray) -> float:
    """sup |first - second| / max(|x|, eps) over the points."""
    diff = np.linalg.norm(np.asarray(first) - np.asarray(second), axis=-1)
    if not np.all(np.isfinite(diff)):
        return math.inf
    weights = np.maximum(np.linalg.norm(points, axis=-1), ORIGIN_FLOOR)
    return float(np.max(diff / weights))


def cone_violation(lam: PointField, points, varpi: float, nu: float) -> tuple[float, float]:
    """
    Largest excess of |lam(x)| over varpi |x| and of the finite-difference
    |D lam(x)| over nu on the points. Nonpositive values mean inside the cone.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    growth = np.linalg.norm(lam(points), axis=-1) - varpi * np.linalg.norm(points, axis=-1)
    slope = np.linalg.norm(field_jacobian(lam, points), ord=2, axis=(-2, -1)) - nu
    return float(np.max(growth)), float(np.max(slope))


def equation_residual(p: NonlinearProblem, lam: PointField, points) -> float:
    """
    max over points of |alpha lam - DA* lam - D lam (A - B N^-1 B* lam) - DF|
    with a finite-difference D lam.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    values = lam(x)
    velocity = closed_loop_field(p, lam)(x)
    residual = (
        p.alpha * values
        - np.einsum("...ji,...j->...i", p.drift_jacobian(x), values)
        - np.einsum("...ij,...j->...i", field_jacobian(lam, x), velocity)
        - p.cost_gradient(x)
    )
    return float(np.max(np.linalg.norm(residual, axis=-1)))


def _transport_update(
    p: NonlinearProblem,
    lam: GradientField,
    grid: GridSpec,
    tol: float,
    quadrature_tol: float,
    workers: int | None,
) -> np.ndarray:
    """
    Solve the frozen-coefficient linear system for the next iterate on the grid.
    Face nodes take the trajectory integral of the same frozen system as
    inflow data; zeros of the closed-loop drift are stagnation points.
    """
    S = p.gain_matrix()
    x = grid.points()
    values = lam(x)
    shape = grid.shape + (-1,)
    drift = (p.drift(x) - values @ S.T).reshape(shape)
    source = (
        p.cost_gradient(x) + np.einsum("...ji,...j->...i", p.drift_jacobian(x), values)
    ).reshape(shape)
    face = ~grid.interior_mask()
    inflow = np.zeros_like(source)
    inflow[face] = gamma_map(p, lam, grid.mesh()[face], tol=quadrature_tol, workers=workers)

    problem = TransportProblem(
        drift=lambda mesh: drift,
        source=lambda mesh: source,
        inflow=lambda mesh: inflow,
        alpha=p.alpha,
        grid=grid,
        allow_stagnation=True,
    )
    start = SplitIterate(grid=grid, values=values.reshape(shape))
    solved, trace = solve_transport(problem, start, tol=tol, workers=workers)
    if not trace.converged:
        logger.warning("transport update stopped with status %s", trace.status.value)
    return solved.values.reshape(-1, solved.values.shape[-1])


def lambda_fixed_point(
    p: NonlinearProblem,
    lam0: GradientField,
    tol: float = 1e-8,
    max_iter: int = 200,
    backend: GradientBackend = "gamma",
    grid: GridSpec | None = None,
    quadrature_tol: float = 1e-10,
    workers: int | None = None,
) -> tuple[GradientField, IterationTrace]:
    """
    Iterate lam <- Gamma(lam) on the collocation points of lam0, refitting the
    interpolant each time, until the weighted sup distance drops below tol.

    The "transport" backend replaces the trajectory integral by a linear
    transport solve on `grid` (whose nodes become the collocation points).
    """
    certificate = p.certificate()
    if not certificate.passed:
        raise PreconditionError(
            f"certificate fails (alpha_ok={certificate.alpha_ok}, b_ok={certificate.b_ok})"
        )
    points = lam0.points
    if backend == "transport":
        if grid is None:
            raise InputError("the transport backend needs a grid")
        points = grid.points()

    growth_excess, slope_excess = cone_violation(lam0, points, certificate.varpi, certificate.nu)
    if growth_excess > CONE_SLACK or slope_excess > CONE_SLACK:
        raise PreconditionError(
            f"initial field leaves the cone (|lam| excess {growth_excess:.3e}, "
            f"|D lam| excess {slope_excess:.3e})"
        )

    recorder = TraceRecorder(tol, name=f"lambda[{backend}]")
    current = GradientField(
        points=points,
        values=lam0(points),
        interpolator=lam0.interpolator,
        varpi=certificate.varpi,
        nu=certificate.nu,
    )
    for _ in range(max_iter):
        # Distance between successive raw iterates, not their refits.
        previous = current.values
        if backend == "gamma":
            updated = gamma_map(p, current, points, tol=quadrature_tol, workers=workers)
        else:
            updated = _transport_update(
                p, current, grid, 0.01 * tol, quadrature_tol, workers
            )
        distance = weighted_sup_distance(updated, previous, points)
        if not math.isfinite(distance):
            recorder.record(math.inf)
            break
        current = GradientField(
            points=points,
            values=updated,
            interpolator=current.interpolator,
            varpi=certificate.varpi,
            nu=certificate.nu,
        )
        if recorder.record(distance):
            break
    return current, recorder.finish()


def minimize_hamiltonian(p: NonlinearProblem, lam_x, x=None) -> np.ndarray:
    """
    argmin_a l(a) + lam . (A(x) + Ba). Closed form -N^-1 B* lam for quadratic
    action costs; otherwise repeated gradient steps from a = 0.
    """
    lam_x = np.asarray(lam_x, dtype=float)
    if p.quadratic_actions:
        if np.linalg.eigvalsh(p.N).min() <= 0:
            raise PreconditionError(
                "N is not positive definite and no action cost is configured"
            )
        return -np.linalg.solve(p.N, (lam_x @ p.B)[..., None])[..., 0]

    a = np.zeros(lam_x.shape[:-1] + (p.control_dim,))
    for _ in range(100):
        updated = _hamiltonian_descent(p, a, lam_x)
        if np.max(np.abs(updated - a)) < 1e-12:
            return updated
        a = updated
    return a


def _hamiltonian_descent(p: NonlinearProblem, a0: np.ndarray, lam_x: np.ndarray) -> np.ndarray:
    """One exact-line-search gradient step on theta -> l(a0 - theta d) + lam . B(a0 - theta d)."""
    direction = p.action_cost_grad(a0) + lam_x @ p.B
    theta_max = 10.0 / (1.0 + spectral_norm(p.N))

    def hamiltonian(theta):
        a = a0 - theta[..., None] * direction
        return p.running_action_cost(a) + np.einsum("...i,...i->...", lam_x, a @ p.B.T)

    theta, _ = golden_section_minimize(
        hamiltonian, np.zeros(direction.shape[:-1]), np.full(direction.shape[:-1], theta_max)
    )
    return a0 - theta[..., None] * direction


def feedback_gradient_step(
    p: NonlinearProblem, a_hat_k: PointField, lam_next: PointField, x
) -> np.ndarray:
    """
    a_k(x) - theta* d with d = D_a f + (D_a g)* lam_next(x) and theta* minimizing
    the Hamiltonian along -d over [0, 10 / (1 + |N|)] for each point separately.
    """
    x = np.asarray(x, dtype=float)
    return _hamiltonian_descent(p, np.asarray(a_hat_k(x), dtype=float), np.asarray(lam_next(x), dtype=float))


def recover_value(p: NonlinearProblem, lam: PointField, a_hat: PointField, x) -> np.ndarray | float:
    """u(x) = (f(x, a(x)) + lam(x) . g(x, a(x))) / alpha."""
    if p.state_cost is None:
        raise InputError("recovering the value needs the state cost F")
    x = np.asarray(x, dtype=float)
    a = np.asarray(a_hat(x), dtype=float)
    lam_x = np.asarray(lam(x), dtype=float)
    velocity = p.drift(x) + a @ p.B.T
    u = (p.state_cost(x) + p.running_action_cost(a) + np.sum(lam_x * velocity, axis=-1)) / p.alpha
    return float(u) if np.ndim(u) == 0 else u


class PolicyStep(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    u: SplitIterate
    lam_values: np.ndarray
    lam: GradientField
    a_next: FeedbackField
    trace: IterationTrace


def policy_style_iteration(
    p: NonlinearProblem,
    a_hat_k: PointField,
    u_grid: SplitIterate,
    tol: float = 1e-10,
    max_sweeps: int = 500,
    interpolator: InterpolatorSpec | None = None,
    workers: int | None = None,
) -> PolicyStep:
    """
    Value-based update: solve alpha u - Du . g(x, a_k(x)) = f(x, a_k(x)) on the
    grid of u_grid, differentiate to get lam, then minimize the Hamiltonian.
    """
    if p.state_cost is None:
        raise InputError("the value-based iteration needs the state cost F")
    grid = u_grid.grid

    def drift(mesh):
        x = mesh.reshape(-1, grid.dim)
        return (p.drift(x) + np.asarray(a_hat_k(x)) @ p.B.T).reshape(mesh.shape)

    def source(mesh):
        x = mesh.reshape(-1, grid.dim)
        a = np.asarray(a_hat_k(x), dtype=float)
        return (p.state_cost(x) + p.running_action_cost(a)).reshape(mesh.shape[:-1])

    problem = TransportProblem(
        drift=drift, source=source, alpha=p.alpha, grid=grid, allow_stagnation=True
    )
    u, trace = solve_transport(problem, u_grid, tol=tol, max_sweeps=max_sweeps, workers=workers)

    lam_values = np.stack(
        [grid_gradient(u.values[..., 0], grid, axis) for axis in range(grid.dim)], axis=-1
    )
    points = grid.points()
    flat_lam = lam_values.reshape(-1, grid.dim)
    interpolator = interpolator or InterpolatorSpec()
    lam = GradientField(points=points, values=flat_lam, interpolator=interpolator)
    a_next = FeedbackField(
        points=points,
        values=minimize_hamiltonian(p, flat_lam, points).reshape(len(points), -1),
        interpolator=interpolator,
    )
    return PolicyStep(u=u, lam_values=lam_values, lam=lam, a_next=a_next, trace=trace)
