"""Exception types raised across the package."""


class BCNNError(Exception):
    """Base class for every error raised by bcnn3d."""


class DataError(BCNNError, ValueError):
    """Input data violates a contract (bad shape, degenerate values, corrupt file)."""


class ConfigError(BCNNError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ShapeMismatch(DataError):
    pass


class ConstantVolume(DataError):
    pass


class VolumeTooSmall(DataError):
    pass


class VolumeSmallerThanPatch(DataError):
    pass


class IndivisibleChannels(ShapeMismatch):
    pass


class OddSpatialDim(ShapeMismatch):
    pass


class BadShape(ShapeMismatch):
    pass


class EmptySamples(DataError):
    pass


class EmptyDataset(DataError):
    pass


class BadMagic(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class BodyDoesNotFit(DataError):
    pass


class BadRate(ConfigError):
    pass


class BadConfig(ConfigError):
    pass


class IndivisibleSamples(ConfigError):
    pass
