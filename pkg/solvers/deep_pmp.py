"""
Continuous-depth networks trained through the maximum principle.

States follow dX/dt = f(X, theta_t) from X_0 = chi(x); the prediction is
g(X_T) = w . X_T. Training minimizes

    J = c sum_m (y^m - g(X_T^m))^2 + int_0^T L(theta_t) dt,   L = reg |theta|^2

with c = 1 ("sum") or 1/M ("mean"). theta_t is piecewise constant on the
time grid. The forward pass is a fixed-step Runge-Kutta scheme and the
backward pass is its exact discrete adjoint, so the assembled gradients are
those of the discrete cost.
"""

import logging
import math
from abc import ABC, abstractmethod
from enum import Enum
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from solvers.approx import ActivationTag, get_activation
from solvers.errors import DivergenceError, InputError
from solvers.numerics import OdeMethod, TABLEAUX, runge_kutta_step

logger = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_HALVINGS = 30
COST_SLACK = 1e-12


class BaseDynamics(ABC):
    """Right-hand side f(X, theta) acting row-wise on states of shape (M, n)."""

    @abstractmethod
    def param_size(self, n: int) -> int:
        pass

    @abstractmethod
    def field(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def state_jacobian(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """D_X f, shape (M, n, n)."""
        pass

    @abstractmethod
    def param_jacobian(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """D_theta f, shape (M, n, P)."""
        pass


class SingleLayerDynamics(BaseDynamics):
    """f(X) = sigma(W X + b) with theta = (W.ravel(), b)."""

    def __init__(self, activation: ActivationTag = "tanh"):
        self.activation = activation
        self.sigma, self.dsigma = get_activation(activation)

    def param_size(self, n: int) -> int:
        return n * n + n

    def unpack(self, theta: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
        return theta[: n * n].reshape(n, n), theta[n * n :]

    def field(self, X, theta):
        W, b = self.unpack(theta, X.shape[-1])
        return self.sigma(X @ W.T + b)

    def state_jacobian(self, X, theta):
        W, b = self.unpack(theta, X.shape[-1])
        slope = self.dsigma(X @ W.T + b)
        return slope[:, :, None] * W[None, :, :]

    def param_jacobian(self, X, theta):
        n = X.shape[-1]
        W, b = self.unpack(theta, n)
        slope = self.dsigma(X @ W.T + b)
        eye = np.eye(n)
        d_weights = slope[:, :, None, None] * eye[None, :, :, None] * X[:, None, None, :]
        d_bias = slope[:, :, None] * eye[None, :, :]
        return np.concatenate([d_weights.reshape(len(X), n, n * n), d_bias], axis=-1)


class ControlDynamics(BaseDynamics):
    """f(X, theta) = theta: the state integrates the control."""

    def param_size(self, n: int) -> int:
        return n

    def field(self, X, theta):
        return np.broadcast_to(theta, X.shape).copy()

    def state_jacobian(self, X, theta):
        return np.zeros(X.shape + (X.shape[-1],))

    def param_jacobian(self, X, theta):
        return np.broadcast_to(np.eye(X.shape[-1]), X.shape + (X.shape[-1],)).copy()


class ContinuousNet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dynamics: BaseDynamics
    input_map: np.ndarray
    readout: np.ndarray
    horizon: float = Field(default=1.0, gt=0)
    steps: int = Field(default=10, ge=1)
    method: OdeMethod = "rk4"

    @field_validator("input_map", "readout", mode="before")
    @classmethod
    def _as_array(cls, value):
        return np.atleast_1d(np.asarray(value, dtype=float))

    @model_validator(mode="after")
    def _check(self):
        if self.input_map.ndim != 2:
            raise InputError("input_map must be an n x d matrix")
        if self.readout.shape != (self.input_map.shape[0],):
            raise InputError(f"readout must have length {self.input_map.shape[0]}")
        return self

    @property
    def state_dim(self) -> int:
        return self.input_map.shape[0]

    @property
    def param_size(self) -> int:
        return self.dynamics.param_size(self.state_dim)

    @property
    def step_size(self) -> float:
        return self.horizon / self.steps


class TrainingSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    inputs: np.ndarray
    targets: np.ndarray
    regularization: float = Field(default=0.0, ge=0)
    weighting: Literal["sum", "mean"] = "sum"

    @field_validator("inputs", mode="before")
    @classmethod
    def _as_points(cls, value):
        value = np.asarray(value, dtype=float)
        return value[:, None] if value.ndim == 1 else value

    @field_validator("targets", mode="before")
    @classmethod
    def _as_targets(cls, value):
        return np.atleast_1d(np.asarray(value, dtype=float))

    @model_validator(mode="after")
    def _check(self):
        if len(self.inputs) < 1 or len(self.inputs) != len(self.targets):
            raise InputError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        return self

    @property
    def loss_weight(self) -> float:
        return 1.0 if self.weighting == "sum" else 1.0 / len(self.targets)


def load_training_set(path: str | Path, regularization: float = 0.0, weighting: str = "sum") -> TrainingSet:
    """Comma-separated rows of d inputs followed by one target; '#' starts a comment."""
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if data.shape[1] < 2:
        raise InputError(f"{path}: each row needs at least one input and a target")
    return TrainingSet(
        inputs=data[:, :-1], targets=data[:, -1], regularization=regularization, weighting=weighting
    )


class ControlPath(BaseModel):
    """theta_k on step k of the time grid, shape (K, P)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    thetas: np.ndarray

    @model_validator(mode="after")
    def _check(self):
        if self.thetas.ndim != 2 or not np.all(np.isfinite(self.thetas)):
            raise InputError("control path must be a finite (K, P) array")
        return self

    @classmethod
    def constant(cls, net: ContinuousNet, theta) -> "ControlPath":
        theta = np.broadcast_to(np.asarray(theta, dtype=float), (net.param_size,))
        return cls(thetas=np.tile(theta, (net.steps, 1)))


class ForwardPass(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    # (K + 1, M, n)
    states: np.ndarray
    # (K, s, M, n): Runge-Kutta stage states of each step
    stages: np.ndarray


class BackwardPass(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    # (K + 1, M, n): costate at the grid nodes
    adjoints: np.ndarray
    # (K, s, M, n): weights multiplying f(Y_i, theta) in the node Hamiltonians
    stage_weights: np.ndarray


def _check_path(net: ContinuousNet, path: ControlPath) -> None:
    if path.thetas.shape != (net.steps, net.param_size):
        raise InputError(f"control path has shape {path.thetas.shape}, expected {(net.steps, net.param_size)}")


def forward_states(net: ContinuousNet, path: ControlPath, data: TrainingSet) -> ForwardPass:
    _check_path(net, path)
    if data.inputs.shape[1] != net.input_map.shape[1]:
        raise InputError(f"inputs have dimension {data.inputs.shape[1]}, net expects {net.input_map.shape[1]}")
    h = net.step_size
    tableau = TABLEAUX[net.method]
    X = data.inputs @ net.input_map.T
    states = [X]
    stages = []
    for k, theta in enumerate(path.thetas):
        X, stage_states = runge_kutta_step(lambda Y: net.dynamics.field(Y, theta), X, h, tableau)
        if not np.all(np.isfinite(X)):
            t = (k + 1) * h
            raise DivergenceError(f"network state blew up at t = {t:.6g}", time=t)
        states.append(X)
        stages.append(np.stack(stage_states))
    return ForwardPass(states=np.stack(states), stages=np.stack(stages))


def predictions(net: ContinuousNet, forward: ForwardPass) -> np.ndarray:
    return forward.states[-1] @ net.readout


def cost(net: ContinuousNet, path: ControlPath, data: TrainingSet, forward: ForwardPass | None = None) -> float:
    forward = forward or forward_states(net, path, data)
    misfit = data.targets - predictions(net, forward)
    penalty = net.step_size * data.regularization * np.sum(path.thetas**2)
    return float(data.loss_weight * np.sum(misfit**2) + penalty)


def backward_adjoints(
    net: ContinuousNet, path: ControlPath, data: TrainingSet, forward: ForwardPass
) -> BackwardPass:
    """Reverse sweep of the Runge-Kutta scheme from p_T = D_X Phi(X_T)."""
    h = net.step_size
    tableau = TABLEAUX[net.method]
    misfit = data.targets - predictions(net, forward)
    p = -2.0 * data.loss_weight * misfit[:, None] * net.readout[None, :]
    adjoints = [p]
    weights = []
    for k in range(net.steps - 1, -1, -1):
        theta = path.thetas[k]
        slope_adjoint = [None] * tableau.stages
        stage_adjoint = [None] * tableau.stages
        for i in range(tableau.stages - 1, -1, -1):
            bar = h * tableau.b[i] * p
            for j in range(i + 1, tableau.stages):
                if tableau.a[j, i] != 0.0:
                    bar = bar + h * tableau.a[j, i] * stage_adjoint[j]
            slope_adjoint[i] = bar
            J = net.dynamics.state_jacobian(forward.stages[k, i], theta)
            stage_adjoint[i] = np.einsum("mji,mj->mi", J, bar)
        p = p + sum(stage_adjoint)
        adjoints.append(p)
        weights.append(np.stack(slope_adjoint) / h)
    return BackwardPass(adjoints=np.stack(adjoints[::-1]), stage_weights=np.stack(weights[::-1]))


def node_hamiltonian(
    net: ContinuousNet, data: TrainingSet, forward: ForwardPass, backward: BackwardPass, k: int, theta: np.ndarray
) -> float:
    """sum_m sum_i w_i^m . f(Y_i^m, theta) + L(theta) with frozen states and costates."""
    total = data.regularization * float(np.sum(theta**2))
    for i in range(forward.stages.shape[1]):
        total += float(np.sum(backward.stage_weights[k, i] * net.dynamics.field(forward.stages[k, i], theta)))
    return total


def node_hamiltonian_gradient(
    net: ContinuousNet, data: TrainingSet, forward: ForwardPass, backward: BackwardPass, k: int, theta: np.ndarray
) -> np.ndarray:
    grad = 2.0 * data.regularization * theta
    for i in range(forward.stages.shape[1]):
        D = net.dynamics.param_jacobian(forward.stages[k, i], theta)
        grad = grad + np.einsum("mnp,mn->p", D, backward.stage_weights[k, i])
    return grad


def cost_gradient(net: ContinuousNet, path: ControlPath, data: TrainingSet) -> np.ndarray:
    """dJ/dtheta_k for every node, assembled from the adjoints; shape (K, P)."""
    forward = forward_states(net, path, data)
    backward = backward_adjoints(net, path, data, forward)
    return net.step_size * np.stack(
        [node_hamiltonian_gradient(net, data, forward, backward, k, path.thetas[k]) for k in range(net.steps)]
    )


class MsaStep(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    path: ControlPath
    failed_nodes: list[int] = Field(default_factory=list)


def _descend_node(H, grad_H, theta: np.ndarray, lr: float, iterations: int, gtol: float) -> tuple[np.ndarray, bool]:
    """Gradient descent with Armijo backtracking on one node Hamiltonian."""
    for _ in range(iterations):
        g = grad_H(theta)
        g_sq = float(g @ g)
        if g_sq <= gtol * gtol:
            return theta, True
        h0 = H(theta)
        step = lr
        for _ in range(MAX_HALVINGS):
            candidate = theta - step * g
            value = H(candidate)
            if math.isfinite(value) and value <= h0 - ARMIJO * step * g_sq:
                theta = candidate
                break
            step *= 0.5
        else:
            return theta, False
    return theta, True


def msa_step(
    net: ContinuousNet,
    path: ControlPath,
    data: TrainingSet,
    lr: float = 0.1,
    inner_steps: int = 1,
    exact_argmin: bool = False,
) -> MsaStep:
    """
    One successive-approximation update: forward pass, backward pass, then a
    safeguarded descent on every node Hamiltonian. exact_argmin runs the
    descent to stationarity instead of a few damped steps.
    """
    forward = forward_states(net, path, data)
    backward = backward_adjoints(net, path, data, forward)
    iterations, gtol = (2000, 1e-12) if exact_argmin else (inner_steps, 0.0)
    updated = path.thetas.copy()
    failed = []
    for k in range(net.steps):
        theta, ok = _descend_node(
            lambda t: node_hamiltonian(net, data, forward, backward, k, t),
            lambda t: node_hamiltonian_gradient(net, data, forward, backward, k, t),
            path.thetas[k],
            lr,
            iterations,
            gtol,
        )
        if ok:
            updated[k] = theta
        else:
            failed.append(k)
    if failed:
        logger.info("line search failed on %d of %d nodes", len(failed), net.steps)
    return MsaStep(path=ControlPath(thetas=updated), failed_nodes=failed)


class TrainStatus(Enum):
    CONVERGED = "converged"
    MAX_EPOCHS = "max_epochs"
    STAGNATED = "stagnated"


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    path: ControlPath
    costs: list[float]
    status: TrainStatus
    halvings: int = 0
    final_lr: float


def train(
    net: ContinuousNet,
    theta0: ControlPath,
    data: TrainingSet,
    epochs: int = 500,
    tol: float = 1e-12,
    lr: float = 0.1,
    inner_steps: int = 1,
    exact_argmin: bool = False,
) -> TrainResult:
    """
    Repeat msa_step, keeping a step only if J does not rise by more than
    1e-12; a rejected step halves the learning rate. costs holds J of every
    accepted path, starting with theta0.
    """
    path = theta0
    J = cost(net, path, data)
    costs = [J]
    halvings = consecutive = 0
    status = TrainStatus.MAX_EPOCHS
    for epoch in range(epochs):
        candidate = msa_step(net, path, data, lr=lr, inner_steps=inner_steps, exact_argmin=exact_argmin).path
        try:
            J_new = cost(net, candidate, data)
        except DivergenceError:
            J_new = math.inf
        if not J_new <= J + COST_SLACK:
            lr *= 0.5
            halvings += 1
            consecutive += 1
            logger.debug("epoch %d: J rose to %.6e, lr -> %.3e", epoch, J_new, lr)
            if consecutive >= MAX_HALVINGS:
                status = TrainStatus.STAGNATED
                logger.warning("training stagnated after %d halvings; keeping best path", consecutive)
                break
            continue
        consecutive = 0
        costs.append(J_new)
        path = candidate
        improvement = J - J_new
        J = J_new
        logger.debug("epoch %d: J = %.12e", epoch, J)
        if improvement < tol:
            status = TrainStatus.CONVERGED
            break
    logger.info("training finished: %s, J = %.6e", status.value, J)
    return TrainResult(path=path, costs=costs, status=status, halvings=halvings, final_lr=lr)
