"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the command line front end can map
failures onto its documented exit codes: 1 for usage or configuration
problems, 2 for bad or unreadable data, 3 for numerical failures.
"""


class HactError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(HactError):
    """Invalid call: bad argument combination, wrong mode, missing input."""

    exit_code = 1


class ConfigError(UsageError):
    """Malformed or inconsistent experiment configuration."""


class ShapeError(UsageError):
    """Tensor or array shapes incompatible with the requested operation."""


class DataError(HactError):
    """Unreadable, malformed, or internally inconsistent data files."""

    exit_code = 2


class CheckpointError(DataError):
    """Corrupt, truncated, or wrong-version checkpoint file."""


class ProjectionError(DataError):
    """Projection undefined (non-positive depth) or fit degenerate."""


class CropError(DataError):
    """No usable crop rectangle can be derived from a skeleton."""


class TrainingError(HactError):
    """Numerical failure during optimization (divergence, non-finite values)."""

    exit_code = 3


class GradCheckError(HactError):
    """Gradient verification could not run (e.g. non-deterministic function)."""

    exit_code = 3
