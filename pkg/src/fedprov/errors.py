"""Exception hierarchy shared by every module."""

from __future__ import annotations


class FedProvError(Exception):
    """Base class for all library errors."""


class ConfigError(FedProvError):
    """Invalid model, dataset, training or bench configuration."""


class ModelError(FedProvError):
    """Shape mismatch or invalid parameter set during training."""


class EncodingError(FedProvError):
    """Parameter set cannot be encoded or a byte sequence cannot be decoded."""


class AggregationError(FedProvError):
    """Client models cannot be averaged together."""


class StorageError(FedProvError):
    """I/O failure or misuse of a provenance store."""


class OrderingError(StorageError):
    """A record is not strictly after the client's previous record."""


class NotFoundError(StorageError):
    """No record exists at the requested coordinates."""


class NoSnapshotError(StorageError):
    """The record exists but carries no parameter blob."""


class VersionMismatchError(StorageError):
    """The store was written with a different format version."""


class CorruptRecordError(StorageError):
    """A frame failed its checksum or declares inconsistent lengths."""

    def __init__(self, message: str, *, path=None, offset=None, coords=None):
        super().__init__(message)
        self.path = path
        self.offset = offset
        self.coords = coords


class NotVerifiableOfflineError(FedProvError):
    """Records carry hashes but no blobs; only replay can check them."""


class AuditInputError(FedProvError):
    """Replay configuration is incompatible with the store it is checked against."""


class UsageError(FedProvError):
    """API used out of order, e.g. submitting to a closed pipeline."""
