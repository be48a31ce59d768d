"""Exception types shared across the package (the CLI maps them to exit codes)."""


class ConfigError(ValueError):
    """Invalid configuration: bad parameters, violated divisibility or stability rules."""


class ModelError(ConfigError):
    """A model cannot be built or evaluates to non-finite values."""


class NumericalAbort(RuntimeError):
    """A trajectory left the finite range; ``record`` holds the metrics gathered so far."""

    def __init__(self, message, particle=None, step=None, record=None):
        super().__init__(message)
        self.particle = particle
        self.step = step
        self.record = record
