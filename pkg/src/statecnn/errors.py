"""Exception hierarchy. The CLI maps each family onto a stable exit code."""


class StateCNNError(Exception):
    """Base class for every error raised by this package."""


class InputError(StateCNNError, ValueError):
    """Bad user-supplied data: files, labels, datasets, images."""


class ShapeError(InputError):
    """Tensor extents are invalid or incompatible."""


class ConfigError(InputError):
    """A configuration value or hyperparameter is out of range."""


class IngestionError(InputError):
    """A dataset tree could not be read."""


class PartitionError(InputError):
    """A dataset cannot be split as requested."""


class StateError(StateCNNError, RuntimeError):
    """An operation was invoked in the wrong lifecycle state."""


class CheckpointError(InputError):
    """A checkpoint file is malformed or does not match its template."""
