"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: configuration/usage problems
exit 2, data and file-format problems exit 3, everything else 4.
"""


class SdcProbeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SdcProbeError):
    """Invalid configuration: bad experiment code, missing attribution,
    out-of-range parameter, unknown config key."""


class UsageError(SdcProbeError):
    """An operation was called outside its contract (bad layer id,
    non-scalar loss, empty dataset, ...)."""


class DataFormatError(SdcProbeError):
    """A file did not match its declared format (IDX, checkpoint,
    attribution file, records CSV)."""


class DataIntegrityError(SdcProbeError):
    """Stored results are mutually inconsistent (e.g. a recall census
    smaller than the observed positives)."""


class TrainingDivergedError(SdcProbeError):
    """Training produced a non-finite loss or non-finite parameters."""
