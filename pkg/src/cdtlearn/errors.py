"""Exception types shared across the package."""


class CDTError(Exception):
    """Base class for all package errors."""


class DimensionError(CDTError, ValueError):
    pass


class ContractError(CDTError, ValueError):
    """An operation was called outside its documented preconditions."""


class DomainError(CDTError, ValueError):
    """Math domain violation, e.g. log of a negative value."""


class DegenerateInputError(CDTError, ValueError):
    pass


class InsufficientSamplesError(CDTError, ValueError):
    pass


class ConvergenceError(CDTError, RuntimeError):
    pass


class NumericalError(CDTError, ArithmeticError):
    """A non-finite value appeared during training."""

    def __init__(self, step, what):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step
        self.what = what


class ParseError(CDTError, ValueError):
    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.offset = offset
