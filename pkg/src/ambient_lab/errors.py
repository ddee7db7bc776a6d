"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A process, schedule or experiment configuration cannot be realized."""


class ContractError(ValueError):
    """Inputs violate a documented precondition (e.g. resurrected pixels)."""


class NumericalError(ArithmeticError):
    """A linear solve or evaluation produced unusable numbers."""


class ConditionalSamplingError(RuntimeError):
    """Drawing A | A_tilde is infeasible for the given operator."""

    def __init__(self, message, rate=0.0):
        super().__init__(message)
        self.rate = rate


class CheckpointError(IOError):
    """A checkpoint or data file is truncated, corrupt or of the wrong kind."""


class DataFormatError(CheckpointError):
    """A dataset file has the wrong magic, version or size."""
