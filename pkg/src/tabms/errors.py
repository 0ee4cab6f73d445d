"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor extents are incompatible."""


class PreconditionError(ValueError):
    """An argument violates an operation's precondition."""


class DataError(ValueError):
    """Input data is malformed (non-finite values, unknown labels)."""


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class PartitionError(ValueError):
    """A class partition has a group wider than the decoder."""


class CoverageError(ValueError):
    """A (model, dataset) pair is missing from an evaluation."""


class SchemaError(ValueError):
    """CSV columns do not line up."""
