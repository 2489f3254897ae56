"""Exception types raised across the package."""


class FlowFiltError(Exception):
    """Base class for all package errors."""


class UpdateImpossibleError(FlowFiltError):
    """The likelihood vanishes on the whole support of the prior."""


class CoincidenceError(FlowFiltError):
    """Two distinct particles share a location where the log kernel is singular."""


class FlowStalledError(FlowFiltError):
    """The Newton flow could not produce a usable step."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ContractError(FlowFiltError, ValueError):
    """An operation was called with inputs violating its preconditions."""
