"""
Linear-quadratic discounted control: dynamics Ax + Ba, running cost
1/2 x*Mx + 1/2 a*Na, discount alpha.

The value gradient is lambda(x) = Px with P solving

    alpha P = M + A*P + PA - P B N^-1 B* P

and P is computed by the fixed-point iteration

    P^{k+1} (alpha I - A + B N^-1 B* P^k) = M + A* P^k.
"""

import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import linalg

from solvers.errors import InputError, StepError
from solvers.numerics import SYMMETRY_TOL, as_finite_matrix, spectral_norm
from solvers.trace import IterationTrace, TraceRecorder

logger = logging.getLogger(__name__)

INVERTIBILITY_TOL = 1e-10


class LqProblem(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    A: np.ndarray
    B: np.ndarray
    N: np.ndarray
    M: np.ndarray
    alpha: float

    @field_validator("A", "B", "N", "M", mode="before")
    @classmethod
    def _finite(cls, value, info):
        return as_finite_matrix(value, info.field_name)

    @model_validator(mode="after")
    def _check(self):
        n, d = self.B.shape
        if self.A.shape != (n, n):
            raise InputError(f"A must be {n}x{n}, got {self.A.shape}")
        if self.N.shape != (d, d):
            raise InputError(f"N must be {d}x{d}, got {self.N.shape}")
        if self.M.shape != (n, n):
            raise InputError(f"M must be {n}x{n}, got {self.M.shape}")
        if not self.alpha > 0:
            raise InputError(f"alpha must be positive, got {self.alpha}")

        if np.max(np.abs(self.N - self.N.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(self.N))):
            raise InputError("N is not symmetric")
        if np.min(np.abs(np.linalg.eigvalsh(self.N))) <= INVERTIBILITY_TOL:
            raise InputError("N is singular")

        m_scale = max(1.0, float(np.max(np.abs(self.M))))
        if np.max(np.abs(self.M - self.M.T)) > SYMMETRY_TOL * m_scale:
            raise InputError("M is not symmetric")
        if np.linalg.eigvalsh(self.M).min() < -1e-12 * m_scale:
            raise InputError("M is not positive semidefinite")
        return self

    @classmethod
    def scalar(
        cls, a: float = 0.0, b: float = 1.0, n: float = 1.0, m: float = 1.0, alpha: float = 3.0
    ) -> "LqProblem":
        return cls(A=[[a]], B=[[b]], N=[[n]], M=[[m]], alpha=alpha)

    @classmethod
    def random(cls, state_dim: int, control_dim: int, alpha: float, seed: int) -> "LqProblem":
        """
        Seeded test instance: entries uniform in [-1, 1], then N <- N*N + I
        and M <- M*M so that N is symmetric invertible and M is PSD.
        """
        rng = np.random.default_rng(seed)
        A = rng.uniform(-1.0, 1.0, (state_dim, state_dim))
        B = rng.uniform(-1.0, 1.0, (state_dim, control_dim))
        N0 = rng.uniform(-1.0, 1.0, (control_dim, control_dim))
        M0 = rng.uniform(-1.0, 1.0, (state_dim, state_dim))
        return cls(A=A, B=B, N=N0.T @ N0 + np.eye(control_dim), M=M0.T @ M0, alpha=alpha)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    def with_alpha(self, alpha: float) -> "LqProblem":
        return LqProblem(A=self.A, B=self.B, N=self.N, M=self.M, alpha=alpha)

    def gain_matrix(self) -> np.ndarray:
        """B N^-1 B*."""
        return self.B @ np.linalg.solve(self.N, self.B.T)


class ConvergenceCertificate(BaseModel):
    gamma: float
    b: float
    m_bound: float
    bnb_norm: float
    alpha: float
    beta: float
    varpi: float
    nu: float
    alpha_ok: bool
    b_ok: bool

    @property
    def threshold(self) -> float:
        """Smallest alpha passing the discount condition."""
        return 2.0 * self.gamma + 2.0 * math.sqrt(self.m_bound * self.bnb_norm)

    @property
    def passed(self) -> bool:
        return self.alpha_ok and self.b_ok

    @property
    def growth_rate(self) -> float:
        """Exponential growth bound of closed-loop trajectories inside the cone."""
        return self.gamma + self.bnb_norm * self.varpi

    @property
    def contraction_bound(self) -> float:
        denominator = self.alpha - self.gamma - self.bnb_norm * self.varpi
        if not self.alpha_ok or denominator <= 0:
            return math.inf
        return (self.gamma + self.bnb_norm * self.nu) / denominator


def _smaller_root(gap: float, constant: float, bnb_norm: float) -> float:
    """Smaller root of bnb*w^2 - gap*w + constant = 0, written to avoid cancellation."""
    if constant == 0.0:
        return 0.0
    if bnb_norm == 0.0:
        return constant / gap
    disc = gap * gap - 4.0 * constant * bnb_norm
    return 2.0 * constant / (gap + math.sqrt(max(disc, 0.0)))


def certificate_from_constants(
    gamma: float, b: float, m_bound: float, bnb_norm: float, alpha: float
) -> ConvergenceCertificate:
    for name, value in (("gamma", gamma), ("b", b), ("m_bound", m_bound), ("bnb_norm", bnb_norm)):
        if not (value >= 0 and math.isfinite(value)):
            raise InputError(f"{name} must be a finite nonnegative number, got {value}")
    if not alpha > 0:
        raise InputError(f"alpha must be positive, got {alpha}")

    gap = alpha - 2.0 * gamma
    product = m_bound * bnb_norm
    alpha_ok = gap > 2.0 * math.sqrt(product)
    beta = gap * gap / (4.0 * product) if product > 0 else math.inf

    if not alpha_ok:
        return ConvergenceCertificate(
            gamma=gamma, b=b, m_bound=m_bound, bnb_norm=bnb_norm, alpha=alpha,
            beta=beta if gap > 0 else math.nan, varpi=math.nan, nu=math.nan,
            alpha_ok=False, b_ok=False,
        )

    varpi = _smaller_root(gap, m_bound, bnb_norm)
    shifted = m_bound + b * varpi
    # Real roots of the nu quadratic exist iff this discriminant is positive.
    b_ok = bnb_norm == 0.0 or gap * gap - 4.0 * shifted * bnb_norm > 0
    nu = _smaller_root(gap, shifted, bnb_norm) if b_ok else math.nan
    certificate = ConvergenceCertificate(
        gamma=gamma, b=b, m_bound=m_bound, bnb_norm=bnb_norm, alpha=alpha,
        beta=beta, varpi=varpi, nu=nu, alpha_ok=True, b_ok=b_ok,
    )
    logger.debug("certificate %s", certificate.model_dump_json())
    return certificate


def compute_certificate(p: LqProblem) -> ConvergenceCertificate:
    certificate = certificate_from_constants(
        gamma=spectral_norm(p.A),
        b=0.0,
        m_bound=spectral_norm(p.M),
        bnb_norm=spectral_norm(p.gain_matrix()),
        alpha=p.alpha,
    )
    if not certificate.passed:
        logger.warning(
            "alpha=%.6g is below the certified threshold %.6g",
            p.alpha,
            certificate.threshold,
        )
    return certificate


def riccati_step(p: LqProblem, P_k: np.ndarray) -> np.ndarray:
    """Solve P^{k+1} K = M + A* P^k with K = alpha I - A + B N^-1 B* P^k."""
    P_k = np.asarray(P_k, dtype=float)
    n = p.state_dim
    if P_k.shape != (n, n):
        raise InputError(f"P must be {n}x{n}, got {P_k.shape}")
    K = p.alpha * np.eye(n) - p.A + p.gain_matrix() @ P_k
    rhs = p.M + p.A.T @ P_k
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(rhs))):
        raise StepError("Riccati step has non-finite coefficients")

    singular_values = linalg.svdvals(K)
    smallest = float(singular_values[-1])
    if smallest <= 1e-14 * max(1.0, float(singular_values[0])):
        raise StepError(
            f"Riccati step matrix is singular (smallest singular value {smallest:.3e})",
            smallest_singular_value=smallest,
        )
    logger.debug("riccati step condition number %.3e", singular_values[0] / smallest)

    # P K = R  <=>  K* P* = R*
    lu_and_piv = linalg.lu_factor(K.T)
    return linalg.lu_solve(lu_and_piv, rhs.T).T


def matrix_distance(P: np.ndarray, Q: np.ndarray) -> float:
    diff = np.asarray(P) - np.asarray(Q)
    if not np.all(np.isfinite(diff)):
        return math.inf
    return spectral_norm(diff)


def solve_riccati(
    p: LqProblem, P0, tol: float = 1e-10, max_iter: int = 10000
) -> tuple[np.ndarray, IterationTrace]:
    """
    Iterate riccati_step from P0. Divergence is reported in the trace, never
    raised; a singular step aborts the run with the partial trace.
    """
    P = np.asarray(P0, dtype=float)
    if P.shape != (p.state_dim, p.state_dim):
        raise InputError(f"P0 must be {p.state_dim}x{p.state_dim}, got {P.shape}")
    recorder = TraceRecorder(tol, name="riccati")
    for _ in range(max_iter):
        try:
            P_next = riccati_step(p, P)
        except StepError as ex:
            return P, recorder.abort(ex.message)
        distance = matrix_distance(P_next, P)
        P = P_next
        if recorder.record(distance):
            break
    return P, recorder.finish()


def riccati_residual(p: LqProblem, P) -> float:
    """Spectral norm of alpha P - M - A*P - PA + P B N^-1 B* P."""
    P = np.asarray(P, dtype=float)
    if P.shape != (p.state_dim, p.state_dim):
        raise InputError(f"P must be {p.state_dim}x{p.state_dim}, got {P.shape}")
    R = p.alpha * P - p.M - p.A.T @ P - P @ p.A + P @ p.gain_matrix() @ P
    return spectral_norm(R)


def lq_value_and_feedback(
    p: LqProblem, P, x
) -> tuple[float, np.ndarray, np.ndarray]:
    """Value u(x), optimal action a(x) = -N^-1 B* Px and gradient lambda(x) = Px."""
    P = np.asarray(P, dtype=float)
    asymmetry = float(np.max(np.abs(P - P.T)))
    if asymmetry > 1e-8 * max(1.0, float(np.max(np.abs(P)))):
        logger.warning("P is not symmetric (max |P - P*| = %.3e); symmetrizing", asymmetry)
    P = 0.5 * (P + P.T)
    x = np.asarray(x, dtype=float)
    lam = P @ x
    a = -np.linalg.solve(p.N, p.B.T @ lam)
    running = 0.5 * x @ p.M @ x + 0.5 * a @ p.N @ a
    u = (running + lam @ (p.A @ x + p.B @ a)) / p.alpha
    return float(u), a, lam


def sample_initial_guesses(
    state_dim: int, count: int, radius: float, seed: int
) -> list[np.ndarray]:
    """Symmetric matrices with 0 < ||P0|| <= radius, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    guesses = []
    for _ in range(count):
        G = rng.uniform(-1.0, 1.0, (state_dim, state_dim))
        G = G + G.T
        guesses.append(G * (radius * rng.uniform(0.5, 1.0) / spectral_norm(G)))
    return guesses
