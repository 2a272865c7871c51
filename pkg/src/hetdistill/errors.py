"""Exception hierarchy shared across the package.

Contract violations (bad shapes, bad arguments, non-finite losses) derive from
``ContractError`` so callers such as the CLI can map them to a single exit
code. I/O failures are left as the builtin ``OSError``.
"""


class ContractError(ValueError):
    """A documented precondition or postcondition was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class InputError(ContractError):
    """An argument value is outside the accepted domain."""


class EvaluationError(ContractError, ArithmeticError):
    """A function evaluation produced a non-finite value."""


class TrainingError(ContractError, RuntimeError):
    """Training diverged; carries the step index where it happened."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
