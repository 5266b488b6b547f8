"""
Shared numerical kernels: operator norms, fixed-step Runge-Kutta integration,
discounted semi-infinite quadrature, the symmetric PSD square root and a
vectorized golden-section line search.
"""

import logging
import math
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import simpson

from solvers.errors import DivergenceError, InputError, StepError

logger = logging.getLogger(__name__)

OdeMethod = Literal["rk4", "euler"]
VectorField = Callable[[np.ndarray], np.ndarray]

SYMMETRY_TOL = 1e-10
PSD_CLAMP = 1e-12


def as_finite_matrix(M, name: str = "matrix") -> np.ndarray:
    arr = np.atleast_2d(np.asarray(M, dtype=float))
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise InputError(f"{name} must be a non-empty 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} has non-finite entries")
    return arr


def spectral_norm(M) -> float:
    """Largest singular value of M."""
    return float(np.linalg.norm(as_finite_matrix(M), 2))


class ButcherTableau(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    @property
    def stages(self) -> int:
        return len(self.b)


TABLEAUX: dict[str, ButcherTableau] = {
    "rk4": ButcherTableau(
        a=np.array(
            [[0.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]
        ),
        b=np.array([1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]),
        c=np.array([0.0, 0.5, 0.5, 1.0]),
    ),
    "euler": ButcherTableau(a=np.zeros((1, 1)), b=np.ones(1), c=np.zeros(1)),
}


class OdeStepSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    step_size: float = Field(gt=0)
    method: OdeMethod = "rk4"

    @property
    def tableau(self) -> ButcherTableau:
        return TABLEAUX[self.method]

    def steps_for(self, duration: float) -> int:
        return max(0, math.ceil(duration / self.step_size - 1e-9))


class Trajectory(BaseModel):
    """States sampled on a uniform time grid; states[i] is the state at times[i]."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    times: np.ndarray
    states: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def runge_kutta_step(
    field: VectorField, y: np.ndarray, h: float, tableau: ButcherTableau
) -> tuple[np.ndarray, list[np.ndarray]]:
    """
    One explicit Runge-Kutta step.

    Returns the new state and the stage states Y_i at which the field was
    evaluated. The field acts on the last axis, so y may carry batch axes.
    """
    slopes: list[np.ndarray] = []
    stage_states: list[np.ndarray] = []
    for i in range(tableau.stages):
        Y = y
        for j in range(i):
            if tableau.a[i, j] != 0.0:
                Y = Y + h * tableau.a[i, j] * slopes[j]
        stage_states.append(Y)
        slopes.append(np.asarray(field(Y), dtype=float))
    y_next = y
    for i in range(tableau.stages):
        y_next = y_next + h * tableau.b[i] * slopes[i]
    return y_next, stage_states


def integrate_ode(
    field: VectorField, x0, duration: float, spec: OdeStepSpec
) -> Trajectory:
    """
    Fixed-step integration of dy/ds = field(y) on [0, duration].

    The step is shrunk so an integer number of steps lands on `duration`.
    Raises DivergenceError carrying the time of the first non-finite state.
    """
    if duration < 0:
        raise InputError(f"duration must be nonnegative, got {duration}")
    y = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InputError("initial state has non-finite entries")

    n_steps = spec.steps_for(duration)
    h = duration / n_steps if n_steps else 0.0
    tableau = spec.tableau
    states = np.empty((n_steps + 1,) + y.shape)
    states[0] = y
    for k in range(n_steps):
        y, _ = runge_kutta_step(field, y, h, tableau)
        if not np.all(np.isfinite(y)):
            t = (k + 1) * h
            raise DivergenceError(f"non-finite state at s = {t:.6g}", time=t)
        states[k + 1] = y
    return Trajectory(times=np.linspace(0.0, duration, n_steps + 1), states=states)


class QuadratureSpec(BaseModel):
    """Truncation of int_0^inf e^{-alpha s} h(s) ds to [0, horizon] on node_count points."""

    model_config = ConfigDict(frozen=True)

    alpha: float
    horizon: float = Field(gt=0)
    node_count: int = Field(ge=2)

    @model_validator(mode="after")
    def _check_alpha(self):
        if not self.alpha > 0:
            raise InputError(f"discount alpha must be positive, got {self.alpha}")
        return self

    @property
    def step(self) -> float:
        return self.horizon / (self.node_count - 1)

    @classmethod
    def for_tolerance(
        cls,
        alpha: float,
        scale: float = 1.0,
        growth_rate: float = 0.0,
        tol: float = 1e-10,
        max_step: float | None = None,
    ) -> "QuadratureSpec":
        """
        Pick the horizon so that the tail bound for |h(s)| <= scale * e^{growth_rate s}
        is below tol. Requires growth_rate < alpha.
        """
        if not alpha > 0:
            raise InputError(f"discount alpha must be positive, got {alpha}")
        decay = alpha - growth_rate
        if not decay > 0:
            raise InputError(
                f"growth rate {growth_rate:.6g} is not below the discount {alpha:.6g}"
            )
        scale = max(scale, 1e-300)
        horizon = max(math.log(max(scale / (decay * tol), 1.0 + 1e-12)) / decay, 1.0 / decay)
        if max_step is None:
            max_step = 0.02 / (alpha + abs(growth_rate))
        n = math.ceil(horizon / max_step) + 1
        if n % 2 == 0:
            n += 1
        return cls(alpha=alpha, horizon=horizon, node_count=n)

    def tail_bound(self, scale: float = 1.0, growth_rate: float = 0.0) -> float:
        decay = self.alpha - growth_rate
        if not decay > 0:
            return math.inf
        return scale * math.exp(-decay * self.horizon) / decay

    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.node_count)


def discounted_integral(times: np.ndarray, values: np.ndarray, alpha: float) -> np.ndarray:
    """Simpson rule for int e^{-alpha t} values(t) dt over the sampled times (axis 0)."""
    weights = np.exp(-alpha * np.asarray(times, dtype=float))
    values = np.asarray(values, dtype=float)
    weights = weights.reshape((-1,) + (1,) * (values.ndim - 1))
    return simpson(weights * values, x=times, axis=0)


def discounted_quadrature(integrand: Callable[[float], float | np.ndarray], spec: QuadratureSpec):
    """int_0^T e^{-alpha s} h(s) ds; vector-valued integrands are integrated componentwise."""
    times = spec.nodes()
    values = np.stack([np.asarray(integrand(float(t)), dtype=float) for t in times])
    result = discounted_integral(times, values, spec.alpha)
    return float(result) if np.ndim(result) == 0 else result


def symmetric_sqrt(S) -> np.ndarray:
    """Symmetric PSD sigma with sigma @ sigma = S."""
    S = as_finite_matrix(S, "S")
    if S.shape[0] != S.shape[1]:
        raise InputError(f"S must be square, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S))))
    asymmetry = float(np.max(np.abs(S - S.T)))
    if asymmetry > SYMMETRY_TOL * scale:
        raise InputError(f"S is not symmetric (max |S - S*| = {asymmetry:.3e})")

    eigenvalues, eigenvectors = np.linalg.eigh(0.5 * (S + S.T))
    if eigenvalues.min() < -PSD_CLAMP * scale:
        raise InputError(f"S is indefinite (smallest eigenvalue {eigenvalues.min():.3e})")
    roots = np.sqrt(np.clip(eigenvalues, 0.0, None))
    sigma = (eigenvectors * roots) @ eigenvectors.T
    return 0.5 * (sigma + sigma.T)


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_minimize(
    fn: Callable[[np.ndarray], np.ndarray],
    lo,
    hi,
    evaluations: int = 60,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Golden-section search on [lo, hi], vectorized over independent brackets.

    `fn` takes an array of trial points (one per bracket) and returns the
    objective values. Both endpoints are included in the final comparison.
    Returns (argmin, min).
    """
    a, b = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    a, b = a.copy(), b.copy()

    def evaluate(x):
        fx = np.asarray(fn(x), dtype=float)
        if not np.all(np.isfinite(fx)):
            raise StepError("line search objective is not finite")
        return fx

    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = evaluate(c), evaluate(d)
    for _ in range(max(0, evaluations - 4)):
        left = fc < fd
        a = np.where(left, a, c)
        b = np.where(left, d, b)
        trial = np.where(left, b - _INV_PHI * (b - a), a + _INV_PHI * (b - a))
        fp = evaluate(trial)
        c, d, fc, fd = (
            np.where(left, trial, d),
            np.where(left, c, trial),
            np.where(left, fp, fd),
            np.where(left, fc, fp),
        )

    x = np.where(fc < fd, c, d)
    fx = np.minimum(fc, fd)
    lo_arr, hi_arr = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    for edge in (lo_arr, hi_arr):
        f_edge = evaluate(edge)
        better = f_edge < fx
        x = np.where(better, edge, x)
        fx = np.where(better, f_edge, fx)
    return x, fx
