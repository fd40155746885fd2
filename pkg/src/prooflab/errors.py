"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class ParameterError(ValueError):
    """Generator or learner parameters are out of range or infeasible."""


class ResourceError(RuntimeError):
    """An enumeration or unfolding exceeded its configured cap."""


class NullEventError(ArithmeticError):
    """Conditioning on an event of probability zero."""
