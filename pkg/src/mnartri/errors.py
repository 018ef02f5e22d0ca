"""Exception hierarchy shared by every module."""


class MnarError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(MnarError, ValueError):
    pass


class EmptyDataError(MnarError, ValueError):
    pass


class ParseError(MnarError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DivisionHazardError(MnarError, ValueError):
    """A zero or negative propensity reached an inverse-propensity weight."""


class MissingInputError(MnarError, ValueError):
    pass


class DegeneratePriorError(MnarError, ValueError):
    pass


class InvalidLossError(MnarError, ValueError):
    pass


class TrainingDivergedError(MnarError, ArithmeticError):
    def __init__(self, epoch, value):
        self.epoch = epoch
        self.value = value
        super().__init__(f"training diverged at epoch {epoch} (objective={value!r})")


class EmptyPseudoSetError(MnarError, ValueError):
    def __init__(self, iteration, epsilon):
        self.iteration = iteration
        self.epsilon = epsilon
        super().__init__(
            f"no pair met the agreement threshold epsilon={epsilon} at iteration {iteration}"
        )


class MemoryGuardError(MnarError, MemoryError):
    pass
