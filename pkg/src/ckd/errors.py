"""Exception hierarchy shared by every module."""


class CKDError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CKDError, ValueError):
    pass


class ContractError(CKDError, RuntimeError):
    """A caller violated a precondition (e.g. backward on a non-scalar)."""


class NumericError(CKDError, FloatingPointError):
    pass


class ConfigError(CKDError, ValueError):
    """Invalid configuration. ``field`` names the offending entry when known."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DataError(CKDError, ValueError):
    pass


class TrainingError(CKDError, RuntimeError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(f"step {step}: {message}" if step is not None else message)


class CheckpointError(CKDError, IOError):
    def __init__(self, message, param=None):
        self.param = param
        super().__init__(f"parameter {param!r}: {message}" if param else message)
