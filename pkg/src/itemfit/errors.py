"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`ItemError`,
so callers (and the CLI) can separate input problems from numerical ones.
"""

from __future__ import annotations


class ItemError(Exception):
    """Base class for all package errors."""


class InputError(ItemError, ValueError):
    """Bad user input: malformed types, files, or arguments."""


class NumericalError(ItemError, ArithmeticError):
    """A computation diverged or produced non-finite values."""


class InvalidModel(InputError):
    pass


class InvalidStatusSpace(InputError):
    pass


class ZeroWidth(InputError):
    """Gaussian curve evaluated with width exactly zero."""


class ZeroProbability(InputError):
    """Inverse logit requested for a vector with a non-positive entry."""


class DegenerateRegressor(InputError):
    """A curve was requested on a regressor that is constant over the grid."""


class EmptyGrid(InputError):
    pass


class NoEligibleRegressors(InputError):
    pass


class SingleLevelCategorical(InputError):
    pass


class SchemaMismatch(InputError):
    pass


class ParseError(InputError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonMarkovianRegressor(InputError):
    """Matrix projection requested for a model with history-dependent inputs."""


class AllZeroWeights(InputError):
    pass


class NonFiniteObjective(NumericalError):
    pass


class FitDivergence(NumericalError):
    pass
