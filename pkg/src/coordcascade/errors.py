"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CoordCascadeError(Exception):
    """Base class for all package errors."""


class EmptyInput(CoordCascadeError):
    pass


class SchemaError(CoordCascadeError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class CycleError(CoordCascadeError):
    pass


class DanglingParent(CoordCascadeError):
    pass


class InsufficientAgents(CoordCascadeError):
    pass


class EmptySamples(CoordCascadeError):
    pass


class InsufficientTail(CoordCascadeError):
    pass


class NonConvergence(CoordCascadeError):
    pass


class IdenticalLikelihoods(CoordCascadeError):
    """Pointwise log-likelihood ratios have (numerically) zero variance."""

    def __init__(self, lr: float = 0.0):
        super().__init__(f"pointwise log-ratios have zero variance (lr={lr:g})")
        self.lr = lr


class InsufficientScales(CoordCascadeError):
    pass


class InsufficientDecisions(CoordCascadeError):
    pass


class InvalidN(CoordCascadeError):
    pass


class ConfigError(CoordCascadeError):
    pass


class InsufficientCascades(CoordCascadeError):
    pass


class UnknownRoot(CoordCascadeError):
    pass


class MissingParams(CoordCascadeError):
    pass
