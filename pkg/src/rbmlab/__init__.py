"""Random Batch Method laboratory: particle integrators, mean-field references and sweeps."""

__version__ = "0.1.0"

from . import backend  # noqa: E402
from .errors import ConfigError, ModelError, NumericalAbort  # noqa: E402

__all__ = ["__version__", "backend", "ConfigError", "ModelError", "NumericalAbort"]
