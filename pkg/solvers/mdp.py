"""
Discounted Markov decision processes on finite state sets.

Costs are nonnegative and minimized; the value of a stationary policy a is
u = f_a + alpha Phi^a u with (Phi^a g)(x) = sum_y pi(x, a(x); y) g(y).
"""

import itertools
import logging
import math
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from solvers.errors import InputError, StepError
from solvers.numerics import golden_section_minimize
from solvers.trace import IterationTrace, TraceRecorder
from utils import map_concurrently

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12
OPERATOR_ROW_SUM_TOL = 1e-10
TIE_TOL = 1e-12
MC_BLOCK = 1000

# Per-state action: an index for finite action sets, a vector for continuous ones.
Policy = np.ndarray
# Q(x, a) on finite state and action sets, shape (S, A).
QTable = np.ndarray


def _check_stochastic(rows: np.ndarray, tol: float, name: str) -> None:
    if not np.all(np.isfinite(rows)):
        raise InputError(f"{name} has non-finite entries")
    if np.any(rows < 0) or np.any(rows > 1):
        raise InputError(f"{name} has entries outside [0, 1]")
    worst = float(np.max(np.abs(rows.sum(axis=-1) - 1.0)))
    if worst > tol:
        raise InputError(f"{name} rows do not sum to 1 (off by {worst:.3e})")


def _check_discount(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise InputError(f"discount must lie in (0, 1), got {alpha}")


class ChainSampler(Protocol):
    """Black-box chain: only simulation access is needed for Monte Carlo."""

    alpha: float

    def sample_next(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def reward_of(self, states: np.ndarray) -> np.ndarray: ...

    def max_reward(self) -> float: ...


class MarkovChain(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    transition: np.ndarray
    reward: np.ndarray
    alpha: float

    @field_validator("transition", "reward", mode="before")
    @classmethod
    def _as_array(cls, value):
        return np.asarray(value, dtype=float)

    @model_validator(mode="after")
    def _check(self):
        S = len(self.reward)
        if self.transition.shape != (S, S):
            raise InputError(f"transition must be {S}x{S}, got {self.transition.shape}")
        _check_stochastic(self.transition, ROW_SUM_TOL, "transition")
        if np.any(self.reward < 0) or not np.all(np.isfinite(self.reward)):
            raise InputError("rewards must be finite and nonnegative")
        _check_discount(self.alpha)
        return self

    @property
    def states(self) -> int:
        return len(self.reward)

    def sample_next(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cdf = np.cumsum(self.transition[states], axis=-1)
        u = rng.random(len(states))
        return np.minimum((u[:, None] >= cdf).sum(axis=-1), self.states - 1)

    def reward_of(self, states: np.ndarray) -> np.ndarray:
        return self.reward[states]

    def max_reward(self) -> float:
        return float(np.max(self.reward))


class MdpProblem(BaseModel):
    """transitions[x, a, y] = pi(x, a; y), costs[x, a] = f(x, a)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    transitions: np.ndarray
    costs: np.ndarray
    alpha: float

    @field_validator("transitions", "costs", mode="before")
    @classmethod
    def _as_array(cls, value):
        return np.asarray(value, dtype=float)

    @model_validator(mode="after")
    def _check(self):
        if self.costs.ndim != 2:
            raise InputError(f"costs must be S x A, got shape {self.costs.shape}")
        S, A = self.costs.shape
        if self.transitions.shape != (S, A, S):
            raise InputError(f"transitions must be {S}x{A}x{S}, got {self.transitions.shape}")
        _check_stochastic(self.transitions, ROW_SUM_TOL, "transitions")
        if np.any(self.costs < 0) or not np.all(np.isfinite(self.costs)):
            raise InputError("costs must be finite and nonnegative")
        _check_discount(self.alpha)
        return self

    @property
    def states(self) -> int:
        return self.costs.shape[0]

    @property
    def actions(self) -> int:
        return self.costs.shape[1]

    def policy_transition(self, policy: Policy) -> np.ndarray:
        return self.transitions[np.arange(self.states), np.asarray(policy, dtype=int)]

    def policy_cost(self, policy: Policy) -> np.ndarray:
        return self.costs[np.arange(self.states), np.asarray(policy, dtype=int)]

    def chain(self, policy: Policy) -> MarkovChain:
        return MarkovChain(
            transition=self.policy_transition(policy),
            reward=self.policy_cost(policy),
            alpha=self.alpha,
        )

    def initial_policy(self) -> Policy:
        """Greedy on the running cost alone."""
        return greedy_policy(self.costs)

    def with_cost_shift(self, shift: float) -> "MdpProblem":
        return MdpProblem(transitions=self.transitions, costs=self.costs + shift, alpha=self.alpha)


def greedy_policy(q: QTable) -> Policy:
    """argmin over actions; values within TIE_TOL of the minimum go to the lowest index."""
    q = np.asarray(q, dtype=float)
    return np.argmax(q <= q.min(axis=1, keepdims=True) + TIE_TOL, axis=1)


def bellman_q(p: MdpProblem, u: np.ndarray) -> QTable:
    """f(x, a) + alpha (Phi^a u)(x)."""
    return p.costs + p.alpha * np.einsum("xay,y->xa", p.transitions, u)


def apply_markov_operator(c, g, policy: Policy | None = None) -> np.ndarray:
    """
    (Phi g)(x) = sum_y pi(x; y) g(y) for a MarkovChain, an MdpProblem with a
    policy, or a raw transition matrix.
    """
    if isinstance(c, MarkovChain):
        matrix = c.transition
    elif isinstance(c, MdpProblem):
        if policy is None:
            raise InputError("an MdpProblem needs a policy to define a chain")
        matrix = c.policy_transition(policy)
    else:
        matrix = np.asarray(c, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise InputError(f"transition must be square, got shape {matrix.shape}")
        _check_stochastic(matrix, OPERATOR_ROW_SUM_TOL, "transition")
    g = np.asarray(g, dtype=float)
    if g.shape != (matrix.shape[1],):
        raise InputError(f"g has shape {g.shape}, expected ({matrix.shape[1]},)")
    return matrix @ g


def evaluate_reward_sum(c: MarkovChain) -> np.ndarray:
    """u = (I - alpha Phi)^-1 f."""
    return np.linalg.solve(np.eye(c.states) - c.alpha * c.transition, c.reward)


class MonteCarloEstimate(BaseModel):
    estimate: float
    stderr: float
    samples: int
    horizon: int
    bias_bound: float


def truncation_horizon(alpha: float, max_reward: float, bias_tol: float = 1e-8) -> int:
    """Smallest n with alpha^n max f / (1 - alpha) < bias_tol."""
    if max_reward <= 0:
        return 1
    return max(1, math.ceil(math.log(bias_tol * (1.0 - alpha) / max_reward) / math.log(alpha)))


def _discounted_paths(
    chain: ChainSampler, start: int, count: int, horizon: int, seed: int
) -> np.ndarray:
    rng = np.random.default_rng(seed)
    states = np.full(count, start, dtype=int)
    totals = np.zeros(count)
    weight = 1.0
    for _ in range(horizon):
        totals += weight * chain.reward_of(states)
        states = chain.sample_next(states, rng)
        weight *= chain.alpha
    return totals


def monte_carlo_value(
    c: ChainSampler,
    x: int,
    samples: int,
    seed: int,
    horizon: int | None = None,
    bias_tol: float = 1e-8,
    workers: int | None = None,
) -> MonteCarloEstimate:
    """
    Mean of truncated discounted reward sums over simulated paths from x.
    Paths are simulated in blocks; block i draws from seed + i.
    """
    if samples < 1:
        raise InputError("need at least one sample")
    max_reward = c.max_reward()
    if horizon is None:
        horizon = truncation_horizon(c.alpha, max_reward, bias_tol)
    blocks = [
        (i, min(MC_BLOCK, samples - start)) for i, start in enumerate(range(0, samples, MC_BLOCK))
    ]
    totals = np.concatenate(
        map_concurrently(
            lambda block: _discounted_paths(c, x, block[1], horizon, seed + block[0]),
            blocks,
            workers=workers,
        )
    )
    stderr = float(np.std(totals, ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return MonteCarloEstimate(
        estimate=float(np.mean(totals)),
        stderr=stderr,
        samples=samples,
        horizon=horizon,
        bias_bound=c.alpha**horizon * max_reward / (1.0 - c.alpha),
    )


class ValueIterationResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    u: np.ndarray
    changes: list[float]
    policy: Policy


def value_iteration(p: MdpProblem, K: int) -> ValueIterationResult:
    """K Bellman updates from u_0 = 0; u_k is the k-period value."""
    u = np.zeros(p.states)
    changes = []
    for _ in range(K):
        updated = bellman_q(p, u).min(axis=1)
        changes.append(float(np.max(np.abs(updated - u))))
        u = updated
    return ValueIterationResult(u=u, changes=changes, policy=greedy_policy(bellman_q(p, u)))


class PolicyIterationResult(BaseModel):
    """Trace distances count the states whose action changed."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    u: np.ndarray
    policy: Policy
    trace: IterationTrace
    values: list[np.ndarray] = Field(default_factory=list)


def policy_iteration(
    p: MdpProblem, a0: Policy | None = None, max_iter: int = 100
) -> PolicyIterationResult:
    policy = p.initial_policy() if a0 is None else np.asarray(a0, dtype=int)
    if policy.shape != (p.states,) or np.any(policy < 0) or np.any(policy >= p.actions):
        raise InputError("initial policy must give a valid action per state")

    recorder = TraceRecorder(0.5, name="policy iteration")
    values = []
    u = evaluate_reward_sum(p.chain(policy))
    for _ in range(max_iter):
        values.append(u)
        improved = greedy_policy(bellman_q(p, u))
        changed = int(np.sum(improved != policy))
        policy = improved
        if changed:
            u = evaluate_reward_sum(p.chain(policy))
        if recorder.record(float(changed)):
            break
    return PolicyIterationResult(u=u, policy=policy, trace=recorder.finish(), values=values)


class QIterationResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    q: QTable
    policy: Policy
    trace: IterationTrace


def q_iteration(p: MdpProblem, max_iter: int = 10000, tol: float = 1e-10) -> QIterationResult:
    """Q^0 = f; u^{k+1}(x) = Q^k(x, a^k(x)); Q^{k+1} = f + alpha Phi^a u^{k+1}."""
    q = p.costs.copy()
    policy = greedy_policy(q)
    recorder = TraceRecorder(tol, name="q iteration")
    for _ in range(max_iter):
        u = q[np.arange(p.states), policy]
        updated = bellman_q(p, u)
        distance = float(np.max(np.abs(updated - q)))
        q = updated
        policy = greedy_policy(q)
        if recorder.record(distance):
            break
    return QIterationResult(q=q, policy=policy, trace=recorder.finish())


def exhaustive_policy_search(p: MdpProblem) -> tuple[np.ndarray, Policy]:
    """Best of all A^S deterministic policies by exact evaluation (small problems only)."""
    # An optimal policy dominates every other one, so it also minimizes the total.
    best_u, best_policy = None, None
    for choice in itertools.product(range(p.actions), repeat=p.states):
        policy = np.array(choice)
        u = evaluate_reward_sum(p.chain(policy))
        if best_u is None or u.sum() < best_u.sum() - TIE_TOL:
            best_u, best_policy = u, policy
    return best_u, best_policy


class ContinuousMdp(BaseModel):
    """
    Finite states with actions in R^d. cost(x, a) and kernel(x, a) take a state
    index and an action array (..., d), returning (...) and (..., S).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    states: int = Field(ge=1)
    action_dim: int = Field(ge=1)
    cost: Callable[[int, np.ndarray], np.ndarray]
    kernel: Callable[[int, np.ndarray], np.ndarray]
    alpha: float
    cost_gradient: Callable[[int, np.ndarray], np.ndarray] | None = None
    # d/da sum_y pi(x, a; y) u(y), given (x, a, u).
    kernel_gradient: Callable[[int, np.ndarray, np.ndarray], np.ndarray] | None = None

    @model_validator(mode="after")
    def _check(self):
        _check_discount(self.alpha)
        return self

    def q_value(self, x: int, a: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.cost(x, a), dtype=float) + self.alpha * (
            np.asarray(self.kernel(x, a), dtype=float) @ u
        )

    def q_gradient(self, x: int, a: np.ndarray, u: np.ndarray, step: float = 1e-5) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if self.cost_gradient is not None:
            grad = np.asarray(self.cost_gradient(x, a), dtype=float)
        else:
            grad = _central_difference(lambda b: self.cost(x, b), a, step)
        if self.kernel_gradient is not None:
            grad = grad + self.alpha * np.asarray(self.kernel_gradient(x, a, u), dtype=float)
        else:
            grad = grad + self.alpha * _central_difference(
                lambda b: np.asarray(self.kernel(x, b)) @ u, a, step
            )
        return grad

    def discretize(self, action_grid) -> MdpProblem:
        """Restrict to a finite sample of actions, shape (A, d)."""
        grid = np.asarray(action_grid, dtype=float).reshape(-1, self.action_dim)
        transitions = np.stack([np.asarray(self.kernel(x, grid), dtype=float) for x in range(self.states)])
        costs = np.stack([np.asarray(self.cost(x, grid), dtype=float) for x in range(self.states)])
        return MdpProblem(transitions=transitions, costs=costs, alpha=self.alpha)


def _central_difference(fn, a: np.ndarray, step: float) -> np.ndarray:
    grad = np.empty_like(a)
    for j in range(a.shape[-1]):
        e = np.zeros(a.shape[-1])
        e[j] = step
        grad[..., j] = (np.asarray(fn(a + e)) - np.asarray(fn(a - e))) / (2.0 * step)
    return grad


def action_gradient_step(
    p: ContinuousMdp, a_k: np.ndarray, u: np.ndarray, x: int, rho_max: float = 10.0
) -> np.ndarray:
    """a_k(x) - rho D_a Q(x, a_k(x)) with rho minimizing Q along that ray."""
    a = np.asarray(a_k, dtype=float)[x]
    direction = p.q_gradient(x, a, u)
    if not np.all(np.isfinite(direction)):
        raise StepError(f"non-finite action gradient at state {x}")
    rho, _ = golden_section_minimize(
        lambda r: p.q_value(x, a - np.asarray(r)[..., None] * direction, u), 0.0, rho_max
    )
    return a - float(rho) * direction


def action_gradient_sweep(
    p: ContinuousMdp, a_k: np.ndarray, u: np.ndarray, workers: int | None = None
) -> np.ndarray:
    """One gradient action update at every state."""
    return np.stack(
        map_concurrently(lambda x: action_gradient_step(p, a_k, u, x), range(p.states), workers=workers)
    )


def load_mdp(path: str | Path) -> MdpProblem:
    """
    Read the plain-text MDP format:

        states <S>
        actions <A>
        discount <alpha>
        transition <a>      followed by S rows of S probabilities, one block per action
        cost                followed by S rows of A costs

    Blank lines and text after '#' are ignored.
    """
    rows: list[tuple[int, list[str]]] = []
    with open(path, "r") as f:
        for number, raw in enumerate(f, start=1):
            tokens = raw.split("#", 1)[0].split()
            if tokens:
                rows.append((number, tokens))

    header: dict[str, float] = {}
    blocks: dict[str, list[list[float]]] = {}
    current = None
    for number, tokens in rows:
        keyword = tokens[0]
        try:
            if keyword in ("states", "actions", "discount"):
                header[keyword] = float(tokens[1])
                current = None
            elif keyword == "transition":
                current = f"transition {int(tokens[1])}"
                blocks[current] = []
            elif keyword == "cost":
                current = "cost"
                blocks[current] = []
            elif current is not None:
                blocks[current].append([float(t) for t in tokens])
            else:
                raise InputError(f"{path}:{number}: unexpected '{keyword}'")
        except InputError:
            raise
        except (IndexError, ValueError):
            raise InputError(f"{path}:{number}: cannot parse '{' '.join(tokens)}'") from None

    for key in ("states", "actions", "discount"):
        if key not in header:
            raise InputError(f"{path}: missing '{key}'")
    S, A = int(header["states"]), int(header["actions"])
    try:
        transitions = np.stack(
            [np.array(blocks[f"transition {a}"], dtype=float) for a in range(A)], axis=1
        )
        costs = np.array(blocks["cost"], dtype=float)
    except KeyError as ex:
        raise InputError(f"{path}: missing block {ex}") from None
    except ValueError:
        raise InputError(f"{path}: ragged transition or cost rows") from None
    if transitions.shape != (S, A, S) or costs.shape != (S, A):
        raise InputError(
            f"{path}: expected {S} states and {A} actions, got transitions {transitions.shape}, costs {costs.shape}"
        )
    return MdpProblem(transitions=transitions, costs=costs, alpha=header["discount"])


def dump_mdp(p: MdpProblem) -> str:
    lines = [f"states {p.states}", f"actions {p.actions}", f"discount {p.alpha!r}"]
    for a in range(p.actions):
        lines.append(f"transition {a}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in p.transitions[:, a, :])
    lines.append("cost")
    lines.extend(" ".join(repr(float(v)) for v in row) for row in p.costs)
    return "\n".join(lines) + "\n"
