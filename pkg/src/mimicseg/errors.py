"""Exception types raised across the package."""


class MimicError(Exception):
    """Base class for all package errors."""


class ShapeError(MimicError, ValueError):
    pass


class ValidationError(MimicError, ValueError):
    pass


class ConfigurationError(MimicError, ValueError):
    pass


class DegenerateInputError(MimicError, ValueError):
    pass


class IngestionError(MimicError, OSError):
    pass


class StaleCacheError(MimicError):
    pass


class TrainingError(MimicError, RuntimeError):
    pass
