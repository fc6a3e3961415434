"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class EmbeddingLookupError(IndexError):
    """A row index fell outside an embedding table."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a graph node."""


class SchemaError(ValueError):
    """A feature schema or a batch violates the schema contract."""


class DatasetFormatError(ValueError):
    """Dataset file header is missing or malformed."""


class DatasetValidationError(ValueError):
    """Dataset contents violate the embedded schema."""


class DatasetTruncatedError(DatasetFormatError):
    """Dataset file ends before the declared row count."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the expected schema."""


class ConfigError(ValueError):
    """Run configuration failed validation."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""
