import logging
import math
import time
from enum import Enum

from pydantic import BaseModel, Field, model_validator

logger = logging.getLogger(__name__)

# Successive-iterate distances above this are treated as a blow-up.
DIVERGENCE_THRESHOLD = 1e12


class TraceStatus(Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    DIVERGED = "diverged"
    ABORTED = "aborted"


class IterationTrace(BaseModel):
    """
    Distances between successive iterates of a fixed-point scheme.

    `elapsed_ms[k]` is the wall clock since the start of the run when
    `distances[k]` was recorded.
    """

    distances: list[float] = Field(default_factory=list)
    tolerance: float
    status: TraceStatus = TraceStatus.MAX_ITER
    message: str = ""
    elapsed_ms: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if any(d < 0 for d in self.distances if not math.isnan(d)):
            raise ValueError("distances must be nonnegative")
        return self

    @property
    def iterations(self) -> int:
        return len(self.distances)

    @property
    def converged(self) -> bool:
        return self.status == TraceStatus.CONVERGED

    @property
    def diverged(self) -> bool:
        """True for every run that did not reach the tolerance."""
        return not self.converged

    @property
    def blew_up(self) -> bool:
        return self.status == TraceStatus.DIVERGED

    @property
    def last_distance(self) -> float:
        return self.distances[-1] if self.distances else math.nan


class TraceRecorder:
    """Accumulates distances and decides when a fixed-point loop stops."""

    def __init__(self, tolerance: float, name: str = "iteration"):
        self.trace = IterationTrace(tolerance=tolerance)
        self.name = name
        self._start = time.perf_counter()

    def record(self, distance: float) -> bool:
        """Append a distance and return True when the loop should stop."""
        self.trace.distances.append(float(distance))
        self.trace.elapsed_ms.append((time.perf_counter() - self._start) * 1000.0)
        k = len(self.trace.distances)
        logger.debug("%s %d: distance %.6e", self.name, k, distance)

        if not math.isfinite(distance) or distance > DIVERGENCE_THRESHOLD:
            self.trace.status = TraceStatus.DIVERGED
            self.trace.message = f"distance {distance:.3e} at iteration {k}"
            logger.info("%s diverged after %d iterations", self.name, k)
            return True
        if distance < self.trace.tolerance:
            self.trace.status = TraceStatus.CONVERGED
            logger.info("%s converged after %d iterations", self.name, k)
            return True
        return False

    def abort(self, message: str) -> IterationTrace:
        self.trace.status = TraceStatus.ABORTED
        self.trace.message = message
        logger.warning("%s aborted: %s", self.name, message)
        return self.trace

    def finish(self) -> IterationTrace:
        if self.trace.status == TraceStatus.MAX_ITER:
            logger.info(
                "%s stopped at max_iter=%d, last distance %.3e",
                self.name,
                self.trace.iterations,
                self.trace.last_distance,
            )
        return self.trace
