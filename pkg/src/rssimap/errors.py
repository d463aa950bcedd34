"""Exception types shared across the package."""


class RssiMapError(Exception):
    """Base class for all package errors."""


class ConfigError(RssiMapError, ValueError):
    """An argument or configuration value is out of its legal range."""


class SchemaError(RssiMapError, ValueError):
    """Input data does not follow the expected file schema."""


class SingularFitError(RssiMapError, ValueError):
    """A least-squares or interpolation system cannot be solved."""


class CoverageError(RssiMapError, ValueError):
    """A source raster does not cover the requested target extent."""


class TrainingError(RssiMapError, RuntimeError):
    """Training produced a non-finite loss or otherwise failed."""

    def __init__(self, message, tile_ids=()):
        super().__init__(message)
        self.tile_ids = list(tile_ids)
