"""Exception types shared across the package."""


class FeeError(Exception):
    """Base class for every error raised by feeplan."""


class InvalidInputError(FeeError, ValueError):
    """An input is non-finite or violates a documented precondition."""


class SingularGeometryError(FeeError, ArithmeticError):
    """Bearing-factor geometry hits a pole (cot argument or denominator vanishes)."""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (pose index {index})")
        self.index = index


class FlatObjectiveError(FeeError):
    """The failure-angle objective has no usable minimum on the search interval."""


class TraceFormatError(FeeError, ValueError):
    """A dig-trace file is malformed; ``line`` and ``column`` locate the fault."""

    def __init__(self, message, line=None, column=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.column = column


class ConfigError(FeeError, ValueError):
    """A scenario or planner configuration is incomplete or inconsistent."""


class NoInformationError(FeeError):
    """The trace carries no engaged samples, so nothing can be identified."""


class ContractViolationError(FeeError, ValueError):
    """A caller asked for something the contract forbids (e.g. fixing a dominant parameter)."""


class ConvergenceError(FeeError):
    """Every solve failed to converge; ``diagnostics`` carries the details."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class InfeasibleBaselineError(FeeError):
    """A baseline path cannot reach the requested enclosed area inside the workspace."""
