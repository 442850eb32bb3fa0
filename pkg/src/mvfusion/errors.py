"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: usage errors exit 1,
data/configuration errors exit 2, runtime failures exit 3.
"""


class MvfusionError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(MvfusionError):
    """A manifest or in-memory dataset violates the documented schema."""


class DataCorruptionError(MvfusionError):
    """An on-disk array does not match the size declared by its manifest."""


class RangeError(MvfusionError):
    """A split refers to sample indices outside [0, N)."""


class ConfigurationError(MvfusionError):
    """A configuration value is invalid or degenerate for the operation."""


class PartitionError(MvfusionError):
    """Bin edges do not partition the time axis into non-empty bins."""


class ShapeError(MvfusionError):
    """Operand shapes do not conform to an operation's shape rule."""


class AxisError(MvfusionError):
    """An axis argument is out of range for the operand."""


class GraphError(MvfusionError):
    """A computation-graph contract was violated (e.g. non-scalar root)."""


class NumericError(MvfusionError):
    """Non-finite values surfaced where finite arithmetic is required."""


class RunFailedError(MvfusionError):
    """Every run of an experiment failed; recorded diagnostics attached."""


class MetricError(MvfusionError):
    """A metric is undefined for the given labels (e.g. single-class)."""
