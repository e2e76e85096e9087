"""Exception hierarchy.

``ConfigError`` subclasses signal bad input (the CLI maps them to exit code 2);
everything else under ``ZNLError`` is a numerical or precondition failure.
"""

from __future__ import annotations


class ZNLError(Exception):
    pass


class ConfigError(ZNLError):
    pass


class ExprSyntaxError(ConfigError):
    def __init__(self, offset: int, expected: str):
        super().__init__(f"syntax error at byte {offset}: expected {expected}")
        self.offset = offset
        self.expected = expected


class UnknownIdentifier(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"unknown identifier {name!r}")
        self.name = name


class MissingKey(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


class InvalidValue(ConfigError):
    pass


class DomainError(ZNLError, ArithmeticError):
    pass


class PreconditionViolated(ZNLError, ValueError):
    pass


class NonConvergent(ZNLError):
    pass


class StepTooLarge(PreconditionViolated):
    pass


class BranchDoesNotLeave(ZNLError):
    pass


class DegenerateDenominator(ZNLError):
    pass


class DegenerateCase(PreconditionViolated):
    pass


class NoExitMajority(ZNLError):
    pass


class IncompatibleHorizons(ZNLError, ValueError):
    pass


class RequiresConstantC(ZNLError):
    pass
