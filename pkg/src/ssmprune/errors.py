"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DatasetError/CheckpointError/OSError -> 2, anything else -> 3.
"""


class SsmPruneError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SsmPruneError, ValueError):
    """Array shape, length or index contract violated."""


class StructureError(SsmPruneError):
    """Model graph is (or would become) internally inconsistent."""


class NotConvLayerError(StructureError):
    """A conv-only operation was pointed at a non-conv layer."""


class StaleCacheError(SsmPruneError):
    """Backward pass received a cache produced by a different forward."""


class ConfigError(SsmPruneError, ValueError):
    """Invalid run configuration, flag value or config-file line."""


class DatasetError(SsmPruneError):
    """Dataset files missing or malformed."""


class CheckpointError(SsmPruneError):
    """Checkpoint file cannot be used."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic."""


class BadChecksumError(CheckpointError):
    """Checkpoint payload fails its integrity checksum."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint was written with an unknown format version."""
