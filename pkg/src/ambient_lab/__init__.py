"""Learning clean-data diffusion models from corrupted observations."""

from .config import ExperimentConfig
from .corruption import CorruptionProcess, GaussianMeasurement, Mask
from .errors import (CheckpointError, ConditionalSamplingError, ConfigurationError,
                     ContractError, DataFormatError, NumericalError)
from .oracle import FiniteDistribution, GMMDistribution
from .schedule import NoiseSchedule

__version__ = "0.1.0"
