"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class ContractViolation(RuntimeError):
    """Raised when an object is used in a state its contract forbids."""


class NumericAbort(RuntimeError):
    """Raised when training produces non-finite parameters.

    ``dump_path`` points at the diagnostic state written before aborting,
    if one was written.
    """

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
