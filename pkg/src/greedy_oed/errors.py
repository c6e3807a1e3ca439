"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class OedError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(OedError, ValueError):
    pass


class NotPositiveDefinite(OedError, ArithmeticError):
    def __init__(self, pivot_index: int, message: str | None = None):
        self.pivot_index = pivot_index
        super().__init__(message or f"matrix is not positive definite (pivot {pivot_index})")


class SingularFactor(OedError, ArithmeticError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"triangular factor has a zero or non-finite diagonal entry at {index}")


class NonFiniteResult(OedError, ArithmeticError):
    pass


class BudgetExceeded(OedError):
    pass


class InvalidConfig(OedError, ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message if key is None else f"{key}: {message}")


class TooLarge(OedError):
    pass


class IndexOutOfRange(OedError, IndexError):
    pass


class CorruptFile(OedError, IOError):
    pass


class InvalidMatrix(OedError, ValueError):
    pass


class InfeasibleRound(OedError):
    def __init__(self, round_index: int):
        self.round_index = round_index
        super().__init__(f"no feasible candidate in round {round_index}")


class AllInfeasible(OedError):
    pass


class PropertyViolation(OedError):
    def __init__(self, message: str, witness: dict):
        self.witness = witness
        super().__init__(f"{message}: {witness}")


class WorkerFailure(OedError):
    def __init__(self, round_index: int, worker: int, cause: BaseException):
        self.round_index = round_index
        self.worker = worker
        self.cause = cause
        super().__init__(f"worker {worker} failed in round {round_index}: {cause!r}")
