"""
Stochastic gradient descent viewed as a controlled process.

The iteration X_{k+1} = X_k - eta_k D_x f(X_k, Z_k) is compared with the
diffusion

    dX = -u(t) Df(X) dt + u(t) eta sigma(X) dB,    sigma sigma* = Sigma,

where Sigma(x) is the covariance of the sampled gradient and u(t) in
[u0, 1] modulates the step size. The control objective is the terminal
spread E|X_T - E X_T|^2 over an ensemble of replicas. Controls are
deterministic and piecewise constant.
"""

import logging
import math
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from solvers.errors import DivergenceError, InputError
from solvers.numerics import as_finite_matrix, symmetric_sqrt
from utils import map_concurrently

logger = logging.getLogger(__name__)

REPLICA_BLOCK = 1000

# (rng, count) -> Z samples of shape (count, q)
NoiseSampler = Callable[[np.random.Generator, int], np.ndarray]
# (x (..., d), Z (..., q)) -> D_x f(x, Z) of shape (..., d)
SampleGradient = Callable[[np.ndarray, np.ndarray], np.ndarray]


class StochasticObjective(BaseModel):
    """f(x) = E f(x, Z) described through its sampled gradient."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dim: int = Field(ge=1)
    sample: NoiseSampler
    sample_gradient: SampleGradient
    # Df(x) for a batch of states; None falls back to Monte Carlo.
    full_gradient: Callable[[np.ndarray], np.ndarray] | None = None
    gradient_samples: int = Field(default=1000, ge=1)

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        Z = np.asarray(self.sample(rng, count), dtype=float)
        return Z.reshape(count, -1)

    def gradients(self, x: np.ndarray, Z: np.ndarray) -> np.ndarray:
        g = np.asarray(self.sample_gradient(x, Z), dtype=float)
        if not np.all(np.isfinite(g)):
            raise DivergenceError("sampled gradient is not finite")
        return g

    def mean_gradient(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.full_gradient is not None:
            return np.asarray(self.full_gradient(x), dtype=float)
        if rng is None:
            raise InputError("objective has no analytic gradient; a generator is needed for Monte Carlo")
        Z = self.draw(rng, self.gradient_samples)
        return np.mean(self.gradients(x[None, ...], Z.reshape((len(Z),) + (1,) * (x.ndim - 1) + (-1,))), axis=0)


def quadratic_objective(dim: int = 1, mean=None, covariance=None) -> StochasticObjective:
    """
    f(x, Z) = |x - Z|^2 / 2 with Z ~ N(mean, covariance); D_x f = x - Z and
    Df(x) = x - mean. A zero covariance makes Z degenerate.
    """
    mean = np.zeros(dim) if mean is None else np.broadcast_to(np.asarray(mean, dtype=float), (dim,)).copy()
    covariance = np.eye(dim) if covariance is None else as_finite_matrix(covariance, "covariance")
    if covariance.shape != (dim, dim):
        raise InputError(f"covariance must be {dim} x {dim}, got {covariance.shape}")
    root = symmetric_sqrt(covariance)

    def sample(rng: np.random.Generator, count: int) -> np.ndarray:
        return mean + rng.standard_normal((count, dim)) @ root

    return StochasticObjective(
        dim=dim,
        sample=sample,
        sample_gradient=lambda x, Z: x - Z,
        full_gradient=lambda x: x - mean,
    )


class StepSchedule(BaseModel):
    """
    Step sizes eta_k (k = 1, 2, ...) for the SGD recursion, or the levels of
    a piecewise-constant control u(t) on equal segments of [0, T].
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["constant", "harmonic", "explicit"] = "constant"
    scale: float = Field(default=1.0, ge=0)
    values: tuple[float, ...] = ()
    floor: float | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "explicit" and not self.values:
            raise InputError("explicit schedule needs at least one value")
        if any(not math.isfinite(v) or v < 0 for v in self.values):
            raise InputError("schedule values must be finite and nonnegative")
        if self.floor is not None:
            if not self.floor > 0:
                raise InputError(f"schedule floor must be positive, got {self.floor}")
            if self.kind == "constant" and self.scale < self.floor:
                raise InputError(f"constant step {self.scale} is below the floor {self.floor}")
            if self.kind == "explicit" and min(self.values) < self.floor:
                raise InputError(f"schedule value {min(self.values)} is below the floor {self.floor}")
        return self

    @classmethod
    def constant(cls, value: float, floor: float | None = None) -> "StepSchedule":
        return cls(kind="constant", scale=value, floor=floor)

    def rates(self, K: int) -> np.ndarray:
        k = np.arange(1, K + 1, dtype=float)
        if self.kind == "constant":
            return np.full(K, self.scale)
        if self.kind == "harmonic":
            return self.scale / k
        values = np.asarray(self.values)
        return values[np.minimum(np.arange(K), len(values) - 1)]

    def control_levels(self, n_steps: int) -> np.ndarray:
        """u on each of n_steps equal time steps; levels must lie in [floor, 1]."""
        if self.kind == "harmonic":
            raise InputError("a harmonic schedule is not a piecewise-constant control")
        values = np.asarray(self.values if self.kind == "explicit" else (self.scale,))
        low = self.floor if self.floor is not None else 0.0
        if np.any(values > 1.0) or np.any(values < low) or (self.floor is None and np.any(values <= 0)):
            raise InputError(f"control levels must lie in [u0, 1], got {values.tolist()}")
        segment = (np.arange(n_steps) * len(values)) // n_steps
        return values[segment]


class SgdTrajectory(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    # (K + 1, d)
    iterates: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]


def _check_start(obj: StochasticObjective, x0) -> np.ndarray:
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (obj.dim,)).copy()
    if not np.all(np.isfinite(x0)):
        raise InputError("initial point has non-finite entries")
    return x0


def sgd_run(obj: StochasticObjective, x0, schedule: StepSchedule, K: int, seed: int) -> SgdTrajectory:
    if K < 1:
        raise InputError(f"K must be at least 1, got {K}")
    rng = np.random.default_rng(seed)
    eta = schedule.rates(K)
    Z = obj.draw(rng, K)
    iterates = np.empty((K + 1, obj.dim))
    iterates[0] = _check_start(obj, x0)
    for k in range(K):
        iterates[k + 1] = iterates[k] - eta[k] * obj.gradients(iterates[k], Z[k])
        if not np.all(np.isfinite(iterates[k + 1])):
            raise DivergenceError(f"SGD iterate blew up at step {k + 1}", time=float(k + 1))
    return SgdTrajectory(iterates=iterates)


def sgd_ensemble(
    obj: StochasticObjective, x0, schedule: StepSchedule, K: int, replicas: int, seed: int
) -> np.ndarray:
    """Terminal iterates X_K of `replicas` independent SGD runs, shape (replicas, d)."""
    if K < 1 or replicas < 1:
        raise InputError("K and replicas must be at least 1")
    rng = np.random.default_rng(seed)
    eta = schedule.rates(K)
    X = np.tile(_check_start(obj, x0), (replicas, 1))
    for k in range(K):
        X = X - eta[k] * obj.gradients(X, obj.draw(rng, replicas))
        if not np.all(np.isfinite(X)):
            raise DivergenceError(f"SGD ensemble blew up at step {k + 1}", time=float(k + 1))
    return X


def _psd_covariance(samples: np.ndarray) -> np.ndarray:
    """ddof=1 covariance of the rows, clamped to the PSD cone."""
    shifted = samples - samples[0]
    cov = np.atleast_2d(np.cov(shifted, rowvar=False, ddof=1))
    cov = 0.5 * (cov + cov.T)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    if eigenvalues.min() < 0:
        cov = (eigenvectors * np.clip(eigenvalues, 0.0, None)) @ eigenvectors.T
        cov = 0.5 * (cov + cov.T)
    return cov


class NoiseEstimate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    covariance: np.ndarray
    factor: np.ndarray
    samples: int


def noise_covariance(obj: StochasticObjective, x, samples: int, seed: int) -> NoiseEstimate:
    """Empirical Sigma(x) of the sampled gradient and its symmetric root sigma."""
    if samples < 2:
        raise InputError(f"need at least 2 samples, got {samples}")
    x = _check_start(obj, x)
    Z = obj.draw(np.random.default_rng(seed), samples)
    grads = obj.gradients(np.broadcast_to(x, (samples, obj.dim)), Z)
    cov = _psd_covariance(grads)
    return NoiseEstimate(covariance=cov, factor=symmetric_sqrt(cov), samples=samples)


class WhitenedNoise(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    # (S, d): Y with D_x f(x, Z) = Df(x) - sigma Y
    samples: np.ndarray
    second_moment: np.ndarray


def whiten_noise(obj: StochasticObjective, x, samples: int, seed: int) -> WhitenedNoise:
    """
    Y samples of the factorization X_{k+1} = X_k - eta Df + eta sigma Y.

    Y has identity second moment on the range of sigma and zero on its
    complement.
    """
    if samples < 2:
        raise InputError(f"need at least 2 samples, got {samples}")
    x = _check_start(obj, x)
    Z = obj.draw(np.random.default_rng(seed), samples)
    grads = obj.gradients(np.broadcast_to(x, (samples, obj.dim)), Z)
    sigma = symmetric_sqrt(_psd_covariance(grads))
    centered = grads.mean(axis=0) - grads
    Y = centered @ np.linalg.pinv(sigma, rcond=1e-10, hermitian=True).T
    return WhitenedNoise(samples=Y, second_moment=Y.T @ Y / (samples - 1))


class EnsembleStats(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    # (R, d)
    terminal: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def from_samples(cls, terminal: np.ndarray) -> "EnsembleStats":
        terminal = np.asarray(terminal, dtype=float)
        if terminal.ndim == 1:
            terminal = terminal[:, None]
        if len(terminal) < 2:
            raise InputError(f"need at least 2 replicas, got {len(terminal)}")
        shifted = terminal - terminal[0]
        return cls(terminal=terminal, mean=terminal[0] + shifted.mean(axis=0), covariance=_psd_covariance(terminal))

    @property
    def replicas(self) -> int:
        return len(self.terminal)


def variance_objective(stats: EnsembleStats) -> tuple[float, float]:
    """Unbiased E|X_T - E X_T|^2 and its jackknife standard error."""
    R = stats.replicas
    shifted = stats.terminal - stats.terminal[0]
    centered = shifted - shifted.mean(axis=0)
    sq = np.sum(centered**2, axis=1)
    total = float(np.sum(sq))
    value = total / (R - 1)
    if R < 3:
        return value, math.inf
    leave_one_out = (total - R / (R - 1) * sq) / (R - 2)
    spread = np.sum((leave_one_out - leave_one_out.mean()) ** 2)
    return value, float(math.sqrt((R - 1) / R * spread))


class DiffusionResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    stats: EnsembleStats
    times: np.ndarray
    # (n + 1, R, d) when requested
    paths: np.ndarray | None = None


def _batched_factor(obj: StochasticObjective, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """sigma(X_r) for every row of X from shared noise samples Z, shape (R, d, d)."""
    grads = obj.gradients(X[None, :, :], Z[:, None, :])
    centered = grads - grads.mean(axis=0)
    cov = np.einsum("sri,srj->rij", centered, centered) / (len(Z) - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, 1, 2)))
    roots = np.sqrt(np.clip(eigenvalues, 0.0, None))
    return np.einsum("rik,rk,rjk->rij", eigenvectors, roots, eigenvectors)


def _simulate_block(
    obj: StochasticObjective,
    x0: np.ndarray,
    levels: np.ndarray,
    eta: float,
    h: float,
    sigma: np.ndarray,
    count: int,
    rng: np.random.Generator,
    refresh_every: int | None,
    noise_samples: int,
    keep_paths: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    X = np.tile(x0, (count, 1))
    factor = np.broadcast_to(sigma, (count,) + sigma.shape)
    paths = [X] if keep_paths else None
    root_h = math.sqrt(h)
    for n, u in enumerate(levels):
        if refresh_every and n > 0 and n % refresh_every == 0:
            factor = _batched_factor(obj, X, obj.draw(rng, noise_samples))
        increments = root_h * rng.standard_normal((count, obj.dim))
        drift = obj.mean_gradient(X, rng)
        X = X - u * h * drift + u * eta * np.einsum("rij,rj->ri", factor, increments)
        if not np.all(np.isfinite(X)):
            t = (n + 1) * h
            raise DivergenceError(f"diffusion blew up at t = {t:.6g}", time=t)
        if keep_paths:
            paths.append(X)
    return X, (np.stack(paths) if keep_paths else None)


def diffusion_simulate(
    obj: StochasticObjective,
    x0,
    control: StepSchedule,
    eta: float,
    horizon: float,
    replicas: int,
    seed: int,
    step: float | None = None,
    sigma=None,
    refresh_every: int | None = None,
    noise_samples: int = 1000,
    keep_paths: bool = False,
    workers: int | None = None,
) -> DiffusionResult:
    """
    Euler-Maruyama ensemble of the controlled diffusion.

    sigma defaults to the factor estimated at x0 and stays frozen unless
    refresh_every re-estimates it per replica every that many steps.
    Replicas run in blocks whose generators are spawned from `seed`, so the
    result does not depend on the worker count.
    """
    if not horizon > 0 or replicas < 2 or eta < 0:
        raise InputError("need horizon > 0, at least 2 replicas and eta >= 0")
    step = 1e-3 * horizon if step is None else step
    if not step > 0:
        raise InputError(f"step must be positive, got {step}")
    x0 = _check_start(obj, x0)
    n_steps = max(1, round(horizon / step))
    h = horizon / n_steps
    levels = control.control_levels(n_steps)
    if sigma is None:
        sigma = noise_covariance(obj, x0, noise_samples, seed).factor
    sigma = as_finite_matrix(sigma, "sigma")
    if sigma.shape != (obj.dim, obj.dim):
        raise InputError(f"sigma must be {obj.dim} x {obj.dim}, got {sigma.shape}")

    counts = [min(REPLICA_BLOCK, replicas - start) for start in range(0, replicas, REPLICA_BLOCK)]
    streams = np.random.SeedSequence(seed).spawn(len(counts))
    blocks = map_concurrently(
        lambda job: _simulate_block(
            obj, x0, levels, eta, h, sigma, job[0], np.random.default_rng(job[1]),
            refresh_every, noise_samples, keep_paths,
        ),
        list(zip(counts, streams)),
        workers=workers,
    )
    terminal = np.concatenate([block[0] for block in blocks])
    paths = np.concatenate([block[1] for block in blocks], axis=1) if keep_paths else None
    logger.debug("simulated %d replicas over %d steps (h = %.3g)", replicas, n_steps, h)
    return DiffusionResult(
        stats=EnsembleStats.from_samples(terminal),
        times=np.linspace(0.0, horizon, n_steps + 1),
        paths=paths,
    )


class ScheduleRow(BaseModel):
    control: float
    value: float
    standard_error: float


class ScheduleSearchResult(BaseModel):
    best: float
    table: list[ScheduleRow]


def schedule_search(
    obj: StochasticObjective,
    x0,
    candidates: list[float],
    eta: float,
    horizon: float,
    replicas: int,
    seed: int,
    floor: float,
    step: float | None = None,
    sigma=None,
    workers: int | None = None,
) -> ScheduleSearchResult:
    """
    Constant controls u in candidates, compared on common Brownian
    increments; the first candidate wins ties.
    """
    if not candidates:
        raise InputError("candidate grid is empty")
    if sigma is None:
        sigma = noise_covariance(obj, x0, 1000, seed).factor
    table = []
    for u in candidates:
        result = diffusion_simulate(
            obj, x0, StepSchedule.constant(u, floor=floor), eta, horizon, replicas, seed,
            step=step, sigma=sigma, workers=workers,
        )
        value, se = variance_objective(result.stats)
        table.append(ScheduleRow(control=u, value=value, standard_error=se))
    best = table[0]
    for row in table[1:]:
        if row.value < best.value:
            best = row
    logger.info("best constant control u = %.6g (variance %.6e)", best.control, best.value)
    return ScheduleSearchResult(best=best.control, table=table)


def ou_terminal_variance(eta: float, s: float, u: float, horizon: float) -> float:
    """Per-coordinate terminal variance for f = |x|^2/2, constant sigma = s I and constant u."""
    if u == 0:
        return 0.0
    return eta**2 * s**2 * u * (1.0 - math.exp(-2.0 * u * horizon)) / 2.0
