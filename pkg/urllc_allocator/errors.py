# -*- coding: utf-8 -*-

"""Exceptions raised by the allocator.

The diagnostic errors carry the data that is needed for the post-mortem
(trace, history, offending draw), so the CLI can still write it to disk.
"""

from typing import Optional, Sequence

import pandas


class InvalidInputError(ValueError):
    """An operation was called outside of its domain."""


class ConfigurationError(InvalidInputError):
    """The configuration file is missing, unreadable or invalid."""


class InfeasiblePowerError(ArithmeticError):
    """The closed-form power allocation returned a negative component.

    :param draws: Indices of the draws (rows of the gain batch) that are
        infeasible
    """

    def __init__(self, message: str, draws: Sequence[int] = ()):
        super().__init__(message)
        self.draws = list(draws)


class NonConvergenceError(RuntimeError):
    """A stochastic bandwidth search ran out of iterations."""

    def __init__(self, message: str, trace: Optional[pandas.DataFrame] = None):
        super().__init__(message)
        self.trace = trace


class DivergenceError(RuntimeError):
    """The primal-dual training exceeded its bandwidth or multiplier caps."""

    def __init__(
        self, message: str, history: Optional[pandas.DataFrame] = None
    ):
        super().__init__(message)
        self.history = history


class NumericalError(ArithmeticError):
    """A non-finite value appeared in the loss or its gradients."""

    def __init__(self, message: str, user: int = None, draw: int = None):
        super().__init__(message)
        self.user = user
        self.draw = draw
