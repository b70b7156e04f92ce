class DomainError(ValueError):
    """An argument violates an operation's precondition."""


class FormatError(ValueError):
    """A file or serialized payload is malformed."""


class SingularSystemError(ArithmeticError):
    """A linear system is singular or numerically rank deficient."""
