"""Exception hierarchy shared by all modules."""


class TimeParError(Exception):
    """Base class for every error raised by the package."""


class ContractError(TimeParError, ValueError):
    """Shapes, ranges or configuration values violate an operation's contract."""


class NumericError(TimeParError, FloatingPointError):
    """A non-finite value entered or appeared in a computation."""

    def __init__(self, message, iteration=None):
        self.detail = message
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)

    def __reduce__(self):
        return self.__class__, (self.detail, self.iteration)


class RankDeficientError(TimeParError, ArithmeticError):
    """Unregularized normal equations are singular."""


class ProtocolError(TimeParError, RuntimeError):
    """A synchronization round ended without an expected message."""


class PairingError(TimeParError, RuntimeError):
    """A co-state arrived for a batch whose boundary state is unknown."""


class IDXFormatError(TimeParError, ValueError):
    """An IDX file is malformed."""
