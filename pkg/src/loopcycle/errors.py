"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the domain an operation is defined on."""


class NumericError(ArithmeticError):
    """A numerical routine left its validated accuracy regime."""


class ResourceError(RuntimeError):
    """A requested computation exceeds a configured memory/size budget."""


class ConsistencyError(RuntimeError):
    """An internal invariant that must hold by construction was violated."""
