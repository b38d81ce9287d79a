"""Exception types raised by the library."""


class CSBMError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(CSBMError, ValueError):
    """A parameter lies outside the domain where the model is defined."""


class ResourceBudgetError(CSBMError, MemoryError):
    """A requested allocation exceeds the configured memory budget."""


class NonFiniteError(CSBMError, FloatingPointError):
    """An iteration produced a NaN or infinite value.

    ``quantity`` names the first offending intermediate so divergence can be
    traced back to a specific update.
    """

    def __init__(self, quantity: str, iteration: int | None = None):
        self.quantity = quantity
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite value in {quantity}{where}")
