"""Exception hierarchy shared by every module of the package."""


class TrapError(Exception):
    """Base class for all package errors."""


class EmbedderUnavailableError(TrapError):
    pass


class DimensionMismatchError(TrapError, ValueError):
    pass


class ZeroVectorError(TrapError, ValueError):
    pass


class EmptyInputError(TrapError, ValueError):
    pass


class BackendUnavailableError(TrapError):
    pass


class InvalidSettingsError(TrapError, ValueError):
    pass


class AgentUnavailableError(TrapError):
    """Raised when an agent adapter keeps failing after its configured retries."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class OracleError(TrapError):
    pass


class BootstrapError(TrapError):
    pass


class DatasetError(TrapError):
    pass
