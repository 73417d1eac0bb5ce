"""Deterministic federated-learning simulator with a tamper-evident provenance ledger."""

from __future__ import annotations

from .errors import (
    AggregationError,
    AuditInputError,
    ConfigError,
    CorruptRecordError,
    EncodingError,
    FedProvError,
    ModelError,
    NoSnapshotError,
    NotFoundError,
    NotVerifiableOfflineError,
    OrderingError,
    StorageError,
    UsageError,
    VersionMismatchError,
)
from .fl import ProvenanceMode, RunResult, TrainingConfig, aggregate, client_update, load_config, run_federated
from .model import Dataset, DatasetSpec, ModelSpec, gen_dataset, init_model, loss, partition_shards, train_epoch
from .params import ParameterSet, canonical_encode, decode
from .pipeline import PersistencePipeline
from .provenance import (
    AuditOutcome,
    MemorySink,
    VerifyOutcome,
    compute_chain_hash,
    record_snapshot,
    replay_verify,
    resume_verify,
    rollback,
    verify_chain,
)
from .records import HashSignature, SnapshotRecord
from .store import Manifest, ProvenanceStore

__version__ = "0.1.0"
