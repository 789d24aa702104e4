"""Exception types shared across the package."""


class MSNLearnError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MSNLearnError):
    """Invalid configuration value or malformed config file."""


class ManifestError(MSNLearnError):
    """Missing, malformed, or inconsistent dataset manifest."""


class DatasetWriteError(MSNLearnError):
    """Failure while writing a generated dataset to disk."""


class ImageDecodeError(MSNLearnError):
    """An image file could not be read or has the wrong shape."""


class CheckpointError(MSNLearnError):
    """Corrupt or incompatible checkpoint file."""


class NumericsError(MSNLearnError):
    """A non-finite value appeared where the math requires finite ones."""


class DegenerateSplitError(MSNLearnError):
    """A train/eval split does not contain enough classes or videos."""
