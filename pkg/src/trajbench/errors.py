"""Exception taxonomy shared across the toolkit.

Errors are split by audience: contract violations (caller passed something
malformed), numerical failures (a well-posed call hit a singular or divergent
computation), and configuration problems (bad input files).
"""

from __future__ import annotations


class TrajbenchError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatch(TrajbenchError, ValueError):
    """An array argument does not have the shape the contract requires."""


class ContractViolation(TrajbenchError, ValueError):
    """An argument value is outside the documented domain of an operation."""


class ModelError(TrajbenchError, ValueError):
    """A multibody model definition is malformed or inconsistent."""


class ConfigError(TrajbenchError, ValueError):
    """A definition or configuration file is invalid.

    Attributes:
        path: File the error was found in, if known.
        line: 1-based line number of the offending entry, if known.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:" if line is None else f"{path}:{line}:"
        elif line is not None:
            prefix = f"line {line}:"
        super().__init__(f"{prefix} {message}" if prefix else message)


class NumericalError(TrajbenchError, ArithmeticError):
    """A numerical routine produced a singular or non-finite result."""


class SingularConstraintError(NumericalError):
    """A kinematic constraint block is rank deficient.

    Attributes:
        contact: Name of the offending contact point, if identified.
    """

    def __init__(self, message: str, contact: str | None = None):
        self.contact = contact
        super().__init__(message)


class IntegrationBlowUp(NumericalError):
    """State left the finite range during explicit integration.

    Attributes:
        step_index: Index of the (sub)step where the state became non-finite.
        time: Integration time reached before the failure, if known.
    """

    def __init__(self, message: str, step_index: int | None = None, time: float | None = None):
        self.step_index = step_index
        self.time = time
        super().__init__(message)


class StepFailure(NumericalError):
    """An implicit step's Newton iteration failed to converge.

    Attributes:
        residual: Final residual infinity norm.
        iterations: Newton iterations performed.
    """

    def __init__(self, message: str, residual: float | None = None, iterations: int | None = None):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


class EvaluationFailure(TrajbenchError, RuntimeError):
    """A callback could not be evaluated at the requested point.

    Solvers treat this as a soft failure: the trial point is rejected and the
    step is shortened rather than aborting the whole solve.
    """
