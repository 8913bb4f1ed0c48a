"""Exception hierarchy. Each error class carries the CLI exit code it maps to."""

from __future__ import annotations


class AttrDAError(Exception):
    exit_code = 1


class ConfigError(AttrDAError, ValueError):
    exit_code = 2


class SchemaError(AttrDAError, ValueError):
    exit_code = 3


class DataError(AttrDAError, ValueError):
    exit_code = 3


class BankError(AttrDAError, KeyError):
    exit_code = 3

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class ShapeError(AttrDAError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(AttrDAError, FloatingPointError):
    """A forward pass produced NaN or Inf, or training diverged."""

    exit_code = 4


class ContractError(AttrDAError, ValueError):
    """A precondition of an operation was violated by the caller."""
