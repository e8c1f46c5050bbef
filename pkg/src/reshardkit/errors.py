"""Exception hierarchy. Every error carries a machine-readable category
(surfaced by the CLI as ``category=<...>`` on failure)."""

from __future__ import annotations


class CheckpointError(Exception):
    category = "internal"


class PreconditionError(CheckpointError):
    """An operation was called outside its contract."""

    category = "precondition"


class RangeError(CheckpointError):
    """A byte or element range exceeds its container."""

    category = "range"


class MetadataError(CheckpointError):
    """Malformed global metadata file."""

    category = "metadata"

    def __init__(self, message: str, byte_offset: int | None = None):
        super().__init__(message if byte_offset is None else f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class VersionError(MetadataError):
    category = "version"


class LayoutError(CheckpointError):
    """A sharding spec cannot be applied to a model."""

    category = "layout"


class LookupError_(CheckpointError):
    """Unknown fqn or rank."""

    category = "lookup"


class PlanningError(CheckpointError):
    category = "planning"


class ReshardingError(CheckpointError):
    """A wanted shard cannot be assembled from the saved checkpoint."""

    category = "resharding"


class StorageFailure(CheckpointError):
    category = "storage"


class IntegrityError(CheckpointError):
    """Checkpoint incomplete, corrupt, or inconsistent with its metadata."""

    category = "integrity"


class CommError(CheckpointError):
    category = "comm"


class DomainError(CheckpointError):
    """Numerically undefined input (e.g. zero ETTR denominator)."""

    category = "domain"
