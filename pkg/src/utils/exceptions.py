"""
Error hierarchy for the ZIBBMR estimation package.
"""
import numpy as np


class ZibbmrError(Exception):
    """Base class for every error raised by this package"""


class DomainError(ZibbmrError, ValueError):
    """Argument outside the mathematical domain of a function"""


class ShapeError(ZibbmrError, ValueError):
    """Covariate or parameter dimensions do not agree"""


class ContractError(ZibbmrError, ValueError):
    """A precondition of an operation was violated by the caller"""


class StateError(ZibbmrError):
    """Sampler or SAEM state is inconsistent with the data"""


class NoInformationError(ZibbmrError):
    """The data carry no information about the requested parameters"""


class DecompositionError(ZibbmrError, np.linalg.LinAlgError):
    """A covariance matrix could not be factorised"""


class UsageError(ZibbmrError):
    """Invalid command-line or configuration input"""


class ParseError(ZibbmrError):
    """
    Malformed input file

    Args:
        message: Description of the problem
        row: 1-based data row the problem was found on (None for header problems)
    """

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericalFailure(ZibbmrError):
    """
    A fit produced non-finite values and was aborted

    Args:
        message: Description of the failure
        trajectory: Parameter trajectory up to and including the failing iteration
    """

    def __init__(self, message, trajectory=None):
        self.trajectory = trajectory
        super().__init__(message)
