"""
Parallel splitting-up solver for the linear first-order system

    alpha lam(x) - D lam(x) . G(x) = F(x)

on a tensor grid. Each sweep solves, for every axis l, the 1-d problem

    alpha lam_l - G_l d(lam_l)/dx_l = F + sum_{h != l} G_h d(lam_j)/dx_h

along all grid lines in direction l, starting from the same iterate lam_j,
and averages the d results.

Along a grid line the 1-d problem is integrated exactly in the
characteristic time t = int dx / G_l, with the right-hand side
interpolated linearly in x between nodes. The integration direction follows
the sign of G_l so that the kernel exp(alpha t) decays: runs with G_l < 0
start at their left end, runs with G_l > 0 at their right end. Runs that
start at the box boundary take the inflow data when given, every other run
starts from the quasi-steady value Z / alpha.

G_l is also taken linear across each cell, so the cell update is exact
for affine drifts. By default a node with |G_l| < g_min is rejected; with
allow_stagnation it becomes a stagnation point holding Z / alpha, and runs
that flow into it start from the exact value at the zero inside the cell.
"""

import logging
import math
from typing import Callable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from solvers.errors import DegeneracyError, InputError
from solvers.grid import GridSpec
from solvers.trace import IterationTrace, TraceRecorder
from utils import map_concurrently

logger = logging.getLogger(__name__)

GridField = Callable[[np.ndarray], np.ndarray]


class TransportProblem(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    drift: GridField
    source: GridField
    alpha: float
    grid: GridSpec
    g_min: float = Field(default=1e-6, gt=0)
    # Exact boundary values on inflow faces; None uses the Z / alpha closure.
    inflow: GridField | None = None
    # Nodes with |G_l| < g_min take Z / alpha instead of raising.
    allow_stagnation: bool = False

    @model_validator(mode="after")
    def _check(self):
        if not self.alpha > 0:
            raise InputError(f"alpha must be positive, got {self.alpha}")
        return self

    @property
    def dim(self) -> int:
        return self.grid.dim

    def drift_values(self) -> np.ndarray:
        """G on the grid, shape (*shape, d)."""
        G = np.asarray(self.drift(self.grid.mesh()), dtype=float)
        if G.shape != self.grid.shape + (self.dim,):
            raise InputError(f"drift returned shape {G.shape}, expected {self.grid.shape + (self.dim,)}")
        return G

    def source_values(self) -> np.ndarray:
        """F on the grid, shape (*shape, m); scalar sources get m = 1."""
        return _with_components(self.source(self.grid.mesh()), self.grid.shape, "source")

    def inflow_values(self) -> np.ndarray | None:
        if self.inflow is None:
            return None
        return _with_components(self.inflow(self.grid.mesh()), self.grid.shape, "inflow")


def _with_components(values, shape: tuple[int, ...], name: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape == shape:
        values = values[..., None]
    if values.shape[:-1] != shape:
        raise InputError(f"{name} returned shape {values.shape} on a grid of shape {shape}")
    if not np.all(np.isfinite(values)):
        raise InputError(f"{name} is not finite on the grid")
    return values


class SplitIterate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: GridSpec
    values: np.ndarray
    sweep: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.values.shape[:-1] != self.grid.shape:
            raise InputError(
                f"iterate has shape {self.values.shape}, grid is {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InputError("iterate has non-finite values")
        return self

    @classmethod
    def zeros(cls, grid: GridSpec, components: int = 1) -> "SplitIterate":
        return cls(grid=grid, values=np.zeros(grid.shape + (components,)))


def grid_gradient(values: np.ndarray, grid: GridSpec, axis: int) -> np.ndarray:
    """Second-order finite differences, central in the interior."""
    return np.gradient(values, grid.spacing()[axis], axis=axis, edge_order=2)


def _check_nondegenerate(p: TransportProblem, G: np.ndarray, axis: int) -> None:
    weak = np.abs(G[..., axis]) < p.g_min
    if np.any(weak):
        node = tuple(int(i) for i in np.argwhere(weak)[0])
        point = p.grid.mesh()[node]
        raise DegeneracyError(
            f"|G_{axis}| < g_min={p.g_min:g} at node {node} (x = {np.round(point, 6).tolist()})",
            node=node,
            point=point,
        )


def _expm1_ratio(z: np.ndarray) -> np.ndarray:
    """expm1(z) / z, continuous at 0."""
    small = np.abs(z) < 1e-10
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def _cell_coefficients(start: np.ndarray, end: np.ndarray, h: float, alpha: float):
    """
    Exact coefficients of lam_start = decay lam_end + c_start Z_start + c_end Z_end
    over one cell of width h, for speeds |G| = start, end > 0 and both G and Z
    linear in x across the cell.
    """
    log_ratio = np.log(end / start)
    flat = np.abs(log_ratio) < 1e-5
    spread = np.where(flat, 1.0, end - start)
    # Travel time through the cell: h times the inverse log mean of the speeds.
    T = np.where(flat, 2.0 * h / (start + end), h * log_ratio / spread)
    decay = np.exp(-alpha * T)
    total = T * _expm1_ratio(-alpha * T)
    c_flat = (_expm1_ratio(-alpha * T) - decay) / alpha
    # Along the characteristic |G| grows like exp(rate t).
    rate = np.where(flat, 0.0, log_ratio / T)
    tilted = T * _expm1_ratio((rate - alpha) * T)
    c_curved = (tilted - total) / np.expm1(np.where(flat, 1.0, log_ratio))
    c_end = np.where(flat, c_flat, c_curved)
    return decay, total - c_end, c_end


def _solve_lines(
    g: np.ndarray, Z: np.ndarray, h: float, alpha: float, boundary: np.ndarray
) -> np.ndarray:
    """
    Solve alpha lam - g lam' = Z along axis 0 for a batch of lines.

    g has shape (n, L); Z and boundary have shape (n, L, m). boundary holds the
    value used where a run starts at the box edge. Nodes with g == 0 are
    stagnation points and take Z / alpha.
    """
    n = g.shape[0]
    steady = Z / alpha
    negative = g < 0
    positive = g > 0
    left, right = g[:-1], g[1:]

    # Cells whose characteristics run into a zero of g inside the cell.
    converging = (left >= 0) & (right <= 0) & (left != right)
    width = np.where(converging, left - right, 1.0)
    theta = np.where(converging, left / width, 0.0)[..., None]
    capture = (width / h)[..., None]
    Z_zero = Z[:-1] + theta * (Z[1:] - Z[:-1])

    def into_zero(Z_start: np.ndarray) -> np.ndarray:
        return Z_zero / alpha + (Z_start - Z_zero) / (alpha + capture)

    # G < 0: march left to right.
    same = negative[1:] & negative[:-1]
    decay, c_start, c_end = _cell_coefficients(
        np.where(same, -right, 1.0), np.where(same, -left, 1.0), h, alpha
    )
    from_zero = into_zero(Z[1:])
    forward = np.empty_like(Z)
    forward[0] = boundary[0]
    for i in range(n - 1):
        step = (
            decay[i][:, None] * forward[i]
            + c_start[i][:, None] * Z[i + 1]
            + c_end[i][:, None] * Z[i]
        )
        fallback = np.where(converging[i][:, None], from_zero[i], steady[i + 1])
        forward[i + 1] = np.where(same[i][:, None], step, fallback)

    # G > 0: march right to left.
    same = positive[1:] & positive[:-1]
    decay, c_start, c_end = _cell_coefficients(
        np.where(same, left, 1.0), np.where(same, right, 1.0), h, alpha
    )
    to_zero = into_zero(Z[:-1])
    backward = np.empty_like(Z)
    backward[n - 1] = boundary[n - 1]
    for i in range(n - 2, -1, -1):
        step = (
            decay[i][:, None] * backward[i + 1]
            + c_start[i][:, None] * Z[i]
            + c_end[i][:, None] * Z[i + 1]
        )
        fallback = np.where(converging[i][:, None], to_zero[i], steady[i])
        backward[i] = np.where(same[i][:, None], step, fallback)

    return np.where(negative[..., None], forward, np.where(positive[..., None], backward, steady))


def directional_solve(
    p: TransportProblem,
    lam_j: SplitIterate,
    axis: int,
    G: np.ndarray | None = None,
    F: np.ndarray | None = None,
) -> np.ndarray:
    """
    Grid values of the axis-`axis` partial solve from lam_j.

    G and F may be passed precomputed (drift_values / source_values).
    """
    if not 0 <= axis < p.dim:
        raise InputError(f"axis {axis} out of range for dimension {p.dim}")
    G = p.drift_values() if G is None else G
    F = p.source_values() if F is None else F
    g_axis = G[..., axis]
    if p.allow_stagnation:
        g_axis = np.where(np.abs(g_axis) < p.g_min, 0.0, g_axis)
    else:
        _check_nondegenerate(p, G, axis)

    Z = F.copy()
    for other in range(p.dim):
        if other != axis:
            Z += grid_gradient(lam_j.values, p.grid, other) * G[..., other, None]

    inflow = p.inflow_values()
    boundary = Z / p.alpha if inflow is None else inflow

    n = p.grid.nodes[axis]
    components = Z.shape[-1]
    g_lines = np.moveaxis(g_axis, axis, 0).reshape(n, -1)
    z_lines = np.moveaxis(Z, axis, 0).reshape(n, -1, components)
    b_lines = np.moveaxis(boundary, axis, 0).reshape(n, -1, components)

    solved = _solve_lines(g_lines, z_lines, p.grid.spacing()[axis], p.alpha, b_lines)
    moved_shape = (n,) + tuple(np.delete(np.array(p.grid.shape), axis)) + (components,)
    return np.moveaxis(solved.reshape(moved_shape), 0, axis)


def splitting_sweep(
    p: TransportProblem, lam_j: SplitIterate, workers: int | None = None
) -> SplitIterate:
    """All directional solves from the same lam_j, then their average."""
    G = p.drift_values()
    F = p.source_values()
    partial = map_concurrently(
        lambda axis: directional_solve(p, lam_j, axis, G=G, F=F),
        range(p.dim),
        workers=workers,
    )
    total = partial[0].copy()
    for values in partial[1:]:
        total += values
    return SplitIterate(grid=p.grid, values=total / p.dim, sweep=lam_j.sweep + 1)


def amplification_estimate(p: TransportProblem) -> float:
    """
    Worst-case growth per sweep of grid-scale error modes through the
    cross-derivative terms. Values above one mean sweeps can amplify
    round-off at the finest resolved wavelength.
    """
    if p.dim == 1:
        return 0.0
    G = np.abs(p.drift_values())
    per_node = np.sum(G / p.grid.spacing(), axis=-1)
    return float((p.dim - 1) / p.dim * np.max(per_node) / p.alpha)


def solve_transport(
    p: TransportProblem,
    lam0: SplitIterate,
    tol: float = 1e-10,
    max_sweeps: int = 500,
    workers: int | None = None,
) -> tuple[SplitIterate, IterationTrace]:
    growth = amplification_estimate(p)
    if growth > 1.0:
        logger.warning(
            "splitting sweeps may amplify grid-scale errors (estimate %.3g); "
            "increase alpha or coarsen the grid",
            growth,
        )
    if not p.allow_stagnation:
        G = p.drift_values()
        for axis in range(p.dim):
            _check_nondegenerate(p, G, axis)

    recorder = TraceRecorder(tol, name="splitting")
    current = lam0
    for _ in range(max_sweeps):
        try:
            updated = splitting_sweep(p, current, workers=workers)
        except InputError as ex:
            recorder.record(math.inf)
            recorder.trace.message = ex.message
            break
        change = float(np.max(np.abs(updated.values - current.values)))
        current = updated
        if recorder.record(change if math.isfinite(change) else math.inf):
            break
    return current, recorder.finish()


def residual_check(p: TransportProblem, lam: SplitIterate) -> float:
    """max over interior nodes of |alpha lam - D lam . G - F|."""
    G = p.drift_values()
    residual = p.alpha * lam.values - p.source_values()
    for axis in range(p.dim):
        residual -= grid_gradient(lam.values, p.grid, axis) * G[..., axis, None]
    interior = p.grid.interior_mask()
    return float(np.max(np.abs(residual[interior])))
