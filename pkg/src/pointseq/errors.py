"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(ValueError):
    """Missing, malformed, or unusable input data."""


class FileFormatError(DataError):
    """A binary file failed structural validation (bad magic etc.)."""


class VersionError(FileFormatError):
    """A binary file declared an unsupported format version."""


class TruncatedFileError(FileFormatError):
    """A binary file ended before its declared payload."""


class NumericError(RuntimeError):
    """Training or verification hit a non-finite value or failed a gradient check."""
