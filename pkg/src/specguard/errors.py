"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class SizeError(ValueError):
    """Input exceeds a desk-scale size cap."""
