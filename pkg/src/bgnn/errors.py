"""Shared exception types."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An input value lies outside the mathematical domain of the operation."""


class ContractError(ValueError):
    """A caller-side precondition was violated."""


class NumericError(ArithmeticError):
    """A kernel produced a non-finite value (NaN or Inf)."""
