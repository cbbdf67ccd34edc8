"""Exception types shared across the package."""


class ChanscaleError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ChanscaleError, ValueError):
    pass


class PrecisionError(ChanscaleError, TypeError):
    pass


class ContractError(ChanscaleError, ValueError):
    """An argument violates a documented precondition (e.g. s outside [0, 1])."""


class TapeError(ChanscaleError, RuntimeError):
    pass


class ModelError(ChanscaleError, ValueError):
    """Structural problem with a network model or keep set."""


class EmptyNetworkError(ModelError):
    pass


class ModelFormatError(ChanscaleError, ValueError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class ConfigError(ChanscaleError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
        self.detail = message


class TrainingError(ChanscaleError, RuntimeError):
    pass


class DataError(ChanscaleError, ValueError):
    pass
