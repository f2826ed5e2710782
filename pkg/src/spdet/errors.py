"""Exception taxonomy shared across the package."""


class SpdetError(Exception):
    """Base class for all package errors."""


class DimensionError(SpdetError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(SpdetError):
    """Invalid configuration value or key."""


class UsageError(SpdetError):
    """API called outside its contract (e.g. backward on a non-scalar)."""


class InputError(SpdetError):
    """Malformed domain input (e.g. non-positive box extents)."""


class NumericError(SpdetError):
    """A computation produced NaN/Inf; never silently propagated."""


class ParseError(SpdetError):
    """Malformed file content; carries location context in the message."""


class ProtocolError(SpdetError):
    """Evaluation protocol violated (e.g. missing IoU threshold)."""


class VersionError(SpdetError):
    """Checkpoint version or layout mismatch."""


class TrainingAborted(SpdetError):
    """Training stopped on a non-finite loss; message names the batch."""
