"""Shared exception types."""


class ConfigError(ValueError):
    """Bad run configuration: unknown keys, missing prerequisites, invalid values."""


class ShardError(RuntimeError):
    """Dataset shard is missing, malformed, or fails its checksum."""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, malformed, or from the wrong module."""


class GateFailure(RuntimeError):
    """A metric gate configured as a hard threshold did not pass."""
