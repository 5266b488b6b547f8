"""
Function approximation on a collocation set: ridge regression on fixed
features and Gaussian kernel (RKHS) regression.

Both minimize a regularized sum of squares over the training points. The
fitted models double as interpolants for sampled vector fields; vector
targets are fitted componentwise with shared features.
"""

import itertools
import logging
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.spatial.distance import cdist, pdist

from solvers.errors import InputError

logger = logging.getLogger(__name__)

ActivationTag = Literal["relu", "tanh", "sigmoid"]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


ACTIVATIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]] = {
    # Subgradient 0 at the kink.
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(float)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "sigmoid": (_sigmoid, lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))),
}


def get_activation(tag: str):
    """Return (sigma, sigma') for an activation tag."""
    try:
        return ACTIVATIONS[tag]
    except KeyError:
        raise InputError(
            f"Unknown activation '{tag}', expected one of {sorted(ACTIVATIONS)}"
        ) from None


def single_layer_features(W, b, activation: str, x) -> np.ndarray:
    """sigma(W x + b), applied to the last axis of x."""
    sigma, _ = get_activation(activation)
    W = np.asarray(W, dtype=float)
    b = np.asarray(b, dtype=float)
    x = np.asarray(x, dtype=float)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise InputError(
            f"inconsistent shapes W {W.shape}, b {b.shape}, x {x.shape}"
        )
    return sigma(x @ W.T + b)


def _as_points(xs, dim: int | None = None) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None] if dim in (None, 1) else xs[None, :]
    if dim is not None and xs.shape[-1] != dim:
        raise InputError(f"points have dimension {xs.shape[-1]}, expected {dim}")
    return xs


class BasisFamily(BaseModel):
    """Feature map phi: R^dim -> R^size evaluated row-wise on (m, dim) arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str
    dim: int
    size: int = Field(ge=1)
    features: Callable[[np.ndarray], np.ndarray]

    def __call__(self, xs) -> np.ndarray:
        return self.features(_as_points(xs, self.dim))

    @classmethod
    def single_layer(cls, W, b, activation: ActivationTag = "tanh") -> "BasisFamily":
        W = np.array(W, dtype=float)
        b = np.array(b, dtype=float)
        get_activation(activation)
        return cls(
            name=f"single_layer[{activation}]",
            dim=W.shape[1],
            size=W.shape[0],
            features=lambda xs: single_layer_features(W, b, activation, xs),
        )

    @classmethod
    def constant(cls, dim: int = 1) -> "BasisFamily":
        return cls(name="constant", dim=dim, size=1, features=lambda xs: np.ones((len(xs), 1)))


def polynomial_basis(
    dim: int, degree: int, include_constant: bool = True, scale: float = 1.0
) -> BasisFamily:
    """Monomials of (x / scale) of total degree <= degree."""
    exponents = []
    for total in range(0 if include_constant else 1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), total):
            exponents.append(np.bincount(np.array(combo, dtype=int), minlength=dim))
    if not exponents:
        raise InputError("polynomial basis is empty")
    powers = np.array(exponents)

    def features(xs):
        scaled = xs / scale
        return np.prod(scaled[:, None, :] ** powers[None, :, :], axis=-1)

    return BasisFamily(
        name=f"polynomial[{degree}]", dim=dim, size=len(powers), features=features
    )


class KernelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Literal["gaussian"] = "gaussian"
    # None selects the median pairwise distance of the training points.
    bandwidth: float | None = Field(default=None, gt=0)
    regularization: float = Field(default=0.0, ge=0)


def gaussian_kernel(xs: np.ndarray, ys: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(xs, ys, "sqeuclidean") / (2.0 * bandwidth * bandwidth))


def median_bandwidth(xs: np.ndarray) -> float:
    if len(xs) < 2:
        return 1.0
    median = float(np.median(pdist(xs)))
    return median if median > 0 else 1.0


class FittedModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: Literal["parametric", "kernel"]
    coefficients: np.ndarray
    regularization: float
    dim: int
    basis: BasisFamily | None = None
    training_points: np.ndarray | None = None
    bandwidth: float | None = None
    residual_norm: float = 0.0
    condition: float = 1.0

    def design(self, xs) -> np.ndarray:
        """Feature matrix (parametric) or kernel matrix against training points."""
        xs = _as_points(xs, self.dim)
        if self.kind == "parametric":
            return self.basis(xs)
        return gaussian_kernel(xs, self.training_points, self.bandwidth)


def _as_targets(ys, count: int) -> np.ndarray:
    ys = np.asarray(ys, dtype=float)
    if ys.shape[0] != count:
        raise InputError(f"{count} points but {ys.shape[0]} targets")
    if not np.all(np.isfinite(ys)):
        raise InputError("targets have non-finite entries")
    return ys


def fit_parametric(basis: BasisFamily, xs, ys, gamma: float) -> FittedModel:
    """argmin_theta gamma |theta|^2 + sum_m (phi(x^m) . theta - y^m)^2."""
    if gamma < 0:
        raise InputError(f"regularization must be nonnegative, got {gamma}")
    xs = _as_points(xs, basis.dim)
    ys = _as_targets(ys, len(xs))
    Phi = basis(xs)
    if not np.all(np.isfinite(Phi)):
        raise InputError("features are not finite on the training points")

    if gamma == 0 and np.linalg.matrix_rank(Phi) < basis.size:
        raise InputError(
            f"design matrix has rank {np.linalg.matrix_rank(Phi)} < {basis.size}; "
            "use a positive regularization"
        )
    # Solves (Phi* Phi + gamma I) theta = Phi* y without forming Phi* Phi.
    augmented = np.vstack([Phi, np.sqrt(gamma) * np.eye(basis.size)])
    rhs = np.concatenate([ys, np.zeros((basis.size,) + ys.shape[1:])])
    theta, *_ = np.linalg.lstsq(augmented, rhs, rcond=None)
    residual = float(np.linalg.norm(Phi @ theta - ys))
    model = FittedModel(
        kind="parametric",
        coefficients=theta,
        regularization=gamma,
        dim=basis.dim,
        basis=basis,
        residual_norm=residual,
        condition=float(np.linalg.cond(augmented)),
    )
    logger.debug("parametric fit %s: residual %.3e", basis.name, residual)
    return model


def fit_kernel(spec: KernelSpec, xs, ys) -> FittedModel:
    """Representer solution (gamma I + K) c = y."""
    xs = _as_points(xs)
    ys = _as_targets(ys, len(xs))
    gamma = spec.regularization
    bandwidth = spec.bandwidth or median_bandwidth(xs)

    if gamma == 0 and len(xs) > 1 and np.min(pdist(xs)) == 0.0:
        raise InputError(
            "duplicate training points make the kernel system singular; "
            "use a positive regularization"
        )
    K = gaussian_kernel(xs, xs, bandwidth)
    system = K + gamma * np.eye(len(xs))
    try:
        factor = linalg.cho_factor(system)
    except linalg.LinAlgError:
        if gamma > 0:
            raise InputError("kernel system is not positive definite") from None
        jitter = 1e-12 * np.trace(K) / len(xs)
        logger.info("kernel Gram factorization failed; adding jitter %.3e", jitter)
        try:
            factor = linalg.cho_factor(system + jitter * np.eye(len(xs)))
        except linalg.LinAlgError:
            raise InputError("kernel system is numerically singular") from None
    coefficients = linalg.cho_solve(factor, ys)
    residual = float(np.linalg.norm(K @ coefficients - ys))
    return FittedModel(
        kind="kernel",
        coefficients=coefficients,
        regularization=gamma,
        dim=xs.shape[1],
        training_points=xs,
        bandwidth=bandwidth,
        residual_norm=residual,
        condition=float(np.linalg.cond(system)),
    )


def predict(model: FittedModel, x) -> np.ndarray | float:
    """
    Evaluate the model on points with shape (..., dim). A single point
    returns a scalar (or a vector for vector targets).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    elif model.dim == 1 and x.shape[-1] != 1:
        x = x[..., None]
    if x.shape[-1] != model.dim:
        raise InputError(f"points have dimension {x.shape[-1]}, model expects {model.dim}")
    batch = x.shape[:-1]
    values = model.design(x.reshape(-1, model.dim)) @ model.coefficients
    values = values.reshape(batch + model.coefficients.shape[1:])
    if values.ndim == 0:
        return float(values)
    return values


def regularized_objective(model: FittedModel, xs, ys, coefficients=None) -> float:
    """Training objective of the fit, optionally at perturbed coefficients."""
    c = model.coefficients if coefficients is None else np.asarray(coefficients, dtype=float)
    design = model.design(xs)
    residual = design @ c - np.asarray(ys, dtype=float)
    if model.kind == "parametric":
        penalty = np.sum(c * c)
    else:
        penalty = np.sum(c * (design @ c)) if design.shape[0] == design.shape[1] else np.nan
    return float(model.regularization * penalty + np.sum(residual * residual))


class InterpolatorSpec(BaseModel):
    """How sampled fields are turned into queryable functions."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["kernel", "polynomial"] = "kernel"
    bandwidth: float | None = Field(default=None, gt=0)
    regularization: float = Field(default=1e-10, ge=0)
    degree: int = Field(default=3, ge=1)
    include_constant: bool = True
    scale: float = Field(default=1.0, gt=0)


def fit_interpolant(spec: InterpolatorSpec, xs, ys) -> FittedModel:
    xs = _as_points(xs)
    if spec.kind == "kernel":
        return fit_kernel(
            KernelSpec(bandwidth=spec.bandwidth, regularization=spec.regularization), xs, ys
        )
    basis = polynomial_basis(xs.shape[1], spec.degree, spec.include_constant, spec.scale)
    return fit_parametric(basis, xs, ys, spec.regularization)
