"""Exception taxonomy shared by every module in the package."""


class LamError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LamError):
    """Array or tensor shapes are incompatible with the requested operation."""


class ConfigError(LamError):
    """A configuration value violates its documented contract."""


class RangeError(LamError):
    """A coordinate or numeric parameter lies outside its permitted range."""


class ContractError(LamError):
    """An API was invoked in a way its contract forbids."""


class DataError(LamError):
    """Input data is missing, too small, or otherwise unusable."""


class NumericError(LamError):
    """A computation produced or encountered non-finite values."""


class DecodeError(LamError):
    """An image file could not be decoded or uses an unsupported format."""


class AnalysisError(LamError):
    """A network contains a layer the analysis does not understand."""


class WeightLoadError(LamError):
    """Base class for weight-file load failures."""


class BadMagicError(WeightLoadError):
    """The file does not start with the weight-format magic bytes."""


class VersionError(WeightLoadError):
    """The weight file uses an unsupported format version."""


class TruncatedFileError(WeightLoadError):
    """The weight file ended before a declared tensor was complete."""


class ShapeMismatchError(WeightLoadError):
    """A stored tensor's shape does not match its layer descriptor."""
