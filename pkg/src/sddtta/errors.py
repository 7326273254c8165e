"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1 (usage),
FormatError / ArchitectureMismatch -> 2 (data), NumericError -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""


class ShapeError(ValueError):
    """Tensor dimension mismatch; message names the offending axes."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


class FormatError(ValueError):
    """Malformed file content (checkpoint, PGM, manifest, config)."""


class ArchitectureMismatch(FormatError):
    """Checkpoint fingerprint does not match the expected architecture."""


class MetricUndefined(ValueError):
    """Metric has no defined value for the given inputs (e.g. AP with no positives)."""


class NumericError(RuntimeError):
    """A numeric check failed (gradcheck above tolerance, non-finite loss)."""
