"""Exception hierarchy shared across the package."""


class RefQueryError(Exception):
    """Base class for all refquery errors."""


class InvalidShapeError(RefQueryError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyBatchError(RefQueryError):
    """A reduction over zero elements was requested."""


class EmptyInputError(RefQueryError):
    """An input series, file, or collection contains no usable data."""


class StaleTapeError(RefQueryError):
    """A gradient tape was used again after being consumed by backward()."""


class NoOverlapError(RefQueryError):
    """Two time series share no common time range."""


class NoReferenceError(RefQueryError):
    """A reference bank is empty, so no quadruples can be generated."""


class DataError(RefQueryError):
    """Malformed input data (bad CSV row, mismatched grids, missing file)."""


class DivergenceError(RefQueryError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BundleFormatError(RefQueryError):
    """A serialized model bundle could not be decoded."""


class BundleVersionError(BundleFormatError):
    """The bundle file declares an unsupported format version."""


class BundleTruncatedError(BundleFormatError):
    """The bundle file ends before the declared payload is complete."""


class BundleChecksumError(BundleFormatError):
    """The bundle file's CRC trailer does not match its contents."""


class UsageError(RefQueryError):
    """Bad command-line invocation."""
