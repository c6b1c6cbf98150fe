"""Exception hierarchy shared across the package."""


class MSSCANetError(Exception):
    """Base class for all package errors."""


class ShapeError(MSSCANetError, ValueError):
    """Operand extents do not conform."""


class ConfigError(MSSCANetError, ValueError):
    """A model, loss or schedule configuration violates its invariants."""


class DataError(MSSCANetError, ValueError):
    """Malformed manifest, image or corpus specification."""


class LeakageError(DataError):
    """An image path appears in both the training and the test set."""


class NumericError(MSSCANetError, ArithmeticError):
    """A computation produced a non-finite value."""


class CheckpointError(MSSCANetError):
    """Base class for checkpoint decoding failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic/version."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before all declared content was read."""


class CheckpointSchemaError(CheckpointError):
    """Parameter names in the file do not match the model built from its config."""
