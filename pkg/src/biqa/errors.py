"""Exception hierarchy shared across the package."""


class BiqaError(Exception):
    """Base class for all errors raised by this package."""


class DecodeError(BiqaError):
    """Image file could not be read or decoded."""


class UnsupportedFormatError(DecodeError):
    """Image uses a bit depth or mode outside the 8-bit raster formats we accept."""


class GeometryError(BiqaError):
    """Shape or size precondition violated (crop larger than image, non-divisible dims, ...)."""


class FitError(BiqaError):
    """Insufficient or degenerate data for fitting a transform, basis, or model."""


class DataError(BiqaError):
    """Bad training data: NaNs, missing classes, constant labels where forbidden."""


class ConfigurationError(BiqaError):
    """Inconsistent or out-of-range configuration values."""


class DegenerateInputError(BiqaError):
    """Metric input is degenerate (constant vector, too few samples)."""


class ManifestError(BiqaError):
    """Dataset manifest references missing files or is structurally unusable."""


class ManifestParseError(ManifestError):
    """A manifest row could not be parsed; carries the offending line number."""

    def __init__(self, message, line_no=None):
        super().__init__(message)
        self.line_no = line_no


class SplitError(BiqaError):
    """Requested split would leave a part empty."""


class ModelFormatError(BiqaError):
    """Model file has wrong magic or an unsupported format version."""


class ModelCorruptionError(BiqaError):
    """Model file is truncated or internally inconsistent."""


class StageError(BiqaError):
    """Pipeline stage failure; message is prefixed with the stage tag."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
