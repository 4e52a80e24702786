# ponet/errors.py: exception hierarchy and cli exit codes
from __future__ import annotations


EXIT_OK = 0
EXIT_SUITE_FAILURE = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class PonetError(Exception):
    exit_code: int = EXIT_USAGE


class DimensionError(PonetError, ValueError):
    pass


class EmptySequenceError(PonetError, ValueError):
    pass


class InvalidSegmentCountError(PonetError, ValueError):
    pass


class SegmentIndexError(PonetError, IndexError):
    pass


class ConfigError(PonetError, ValueError):
    pass


class InputError(PonetError, ValueError):
    pass


class StateError(PonetError, RuntimeError):
    pass


class BudgetExceededError(PonetError, ValueError):
    pass


class NumericError(PonetError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class DivergenceError(NumericError):
    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"loss diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class SuiteFailure(PonetError):
    exit_code = EXIT_SUITE_FAILURE
