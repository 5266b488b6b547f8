class SolverError(Exception):
    """Base error for all solver-related exceptions."""

    def __init__(self, message, details=None):
        self.message = message
        self.details = details
        super().__init__(message)


class InputError(SolverError, ValueError):
    """Invalid problem data: non-finite entries, bad shapes, broken invariants."""


class DivergenceError(SolverError):
    """A non-finite state was produced while integrating."""

    def __init__(self, message, time: float, details=None):
        self.time = time
        super().__init__(message, details)


class StepError(SolverError):
    """An iteration step could not be computed."""

    def __init__(self, message, smallest_singular_value: float | None = None, details=None):
        self.smallest_singular_value = smallest_singular_value
        super().__init__(message, details)


class PreconditionError(SolverError):
    """A certificate or cone precondition does not hold."""


class DegeneracyError(SolverError):
    """A drift component vanishes where a characteristic solve needs to divide by it."""

    def __init__(self, message, node: tuple[int, ...], point, details=None):
        self.node = node
        self.point = point
        super().__init__(message, details)
