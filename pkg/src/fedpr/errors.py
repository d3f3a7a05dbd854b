"""Exception types shared across the package."""


class FedprError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FedprError):
    """Operand shapes do not conform for the requested operation."""


class RankError(FedprError):
    """A scalar was required but a non-scalar tensor was supplied."""


class OptimizerError(FedprError):
    """Optimizer precondition violated (missing gradient, bad hyperparameter)."""


class DomainError(FedprError):
    """A numeric argument lies outside its permitted interval."""


class LabelError(FedprError):
    """A class label is outside [0, num_classes)."""


class BatchError(FedprError):
    """A batch does not meet the minimum size required by the operation."""


class PartitionError(FedprError):
    """Shared/personalized parameter partitions disagree."""


class AggregationError(FedprError):
    """Parameter snapshots cannot be aggregated (name or shape mismatch)."""


class ConfigError(FedprError):
    """Invalid configuration value."""


class FormatError(FedprError):
    """A serialized file is malformed."""


class DegenerateError(FedprError):
    """Metric undefined for single-class input."""
