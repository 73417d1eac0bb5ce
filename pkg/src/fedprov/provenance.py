"""Chained SHA-256 ledger: recording, offline verification, replay audit and rollback.

Each client has its own chain. Link ``k`` is ``SHA-256(blob_k || raw(hash_{k-1}))``;
the first link is ``SHA-256(blob_1)``. Record coordinates are not hashed, so
reordering is caught by the store's ordering checks rather than by the chain.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from .errors import (
    AuditInputError,
    CorruptRecordError,
    NoSnapshotError,
    NotVerifiableOfflineError,
    OrderingError,
)
from .params import ParameterSet, canonical_encode, decode, iter_encoded
from .records import HashSignature, SnapshotRecord

BLOB_HASH_MISMATCH = "blob-hash-mismatch"
CHAIN_LINK_MISMATCH = "chain-link-mismatch"
MISSING_RECORD = "missing-record"
CORRUPT_RECORD = "corrupt-record"


def compute_chain_hash(blob: bytes, prev: HashSignature | None = None) -> HashSignature:
    h = hashlib.sha256(blob)
    if prev is not None:
        h.update(prev.raw)
    return HashSignature(h.digest())


def chain_hash_params(params: ParameterSet, prev: HashSignature | None = None) -> HashSignature:
    """Same value as ``compute_chain_hash(canonical_encode(params), prev)`` without building the blob."""
    h = hashlib.sha256()
    for chunk in iter_encoded(params):
        h.update(chunk)
    if prev is not None:
        h.update(prev.raw)
    return HashSignature(h.digest())


class MemorySink:
    """In-memory stand-in for a store; used by replay and by tests."""

    def __init__(self, keep_blobs: bool = False):
        self.keep_blobs = keep_blobs
        self.records: dict[int, list[SnapshotRecord]] = {}

    def seed(self, record: SnapshotRecord) -> None:
        """Start ``record``'s client chain from an existing link."""
        self.records.setdefault(record.client_id, []).append(record)

    def append(self, record: SnapshotRecord, *, flush: bool = True) -> None:
        chain = self.records.setdefault(record.client_id, [])
        if chain and record.position <= chain[-1].position:
            raise OrderingError(f"client {record.client_id}: {record.position} does not follow {chain[-1].position}")
        if not self.keep_blobs and record.hash is not None and record.param_blob is not None:
            record = replace(record, param_blob=None)
        chain.append(record)

    def flush(self, client_id: int | None = None) -> None:
        pass

    def latest_hash(self, client_id: int) -> HashSignature | None:
        chain = self.records.get(client_id)
        return chain[-1].hash if chain else None

    def last_coords(self, client_id: int) -> tuple[int, int] | None:
        chain = self.records.get(client_id)
        return chain[-1].position if chain else None

    def ledger(self) -> dict[tuple[int, int, int], HashSignature | None]:
        return {r.coords: r.hash for chain in self.records.values() for r in chain}


def record_snapshot(store, client_id: int, round: int, epoch: int, params: ParameterSet, mode) -> HashSignature | None:
    """Encode ``params`` once, chain-hash and/or keep the blob per ``mode``, submit one record.

    ``store`` is anything with ``append``, ``latest_hash`` and ``last_coords``:
    a :class:`ProvenanceStore`, a :class:`PersistencePipeline` or a :class:`MemorySink`.
    """
    if not (mode.snapshot or mode.hash):
        return None
    last = store.last_coords(client_id)
    if last is not None and (round, epoch) <= last:
        raise OrderingError(f"client {client_id}: ({round}, {epoch}) does not follow {last}")
    blob = canonical_encode(params) if mode.snapshot else None
    digest = None
    if mode.hash:
        prev = store.latest_hash(client_id)
        digest = compute_chain_hash(blob, prev) if blob is not None else chain_hash_params(params, prev)
    store.append(SnapshotRecord(client_id, round, epoch, blob, digest))
    return digest


class Recorder:
    """Provenance hook: one call per client epoch and one per (round, epoch) of the server chain."""

    def __init__(self, store, mode):
        self.store = store
        self.mode = mode
        self.calls = 0
        self.records_written = 0

    def __call__(self, client_id: int, round: int, epoch: int, params: ParameterSet) -> None:
        self.calls += 1
        record_snapshot(self.store, client_id, round, epoch, params, self.mode)
        if self.mode.snapshot or self.mode.hash:
            self.records_written += 1


# -- offline verification -----------------------------------------------------


@dataclass(frozen=True)
class Failure:
    client_id: int
    round: int
    epoch: int
    reason: str

    def to_dict(self) -> dict:
        return {"client_id": self.client_id, "round": self.round, "epoch": self.epoch, "reason": self.reason}


@dataclass(frozen=True)
class VerifyOutcome:
    ok: bool
    first_failure: Failure | None = None
    checked: int = 0
    failures: tuple[Failure, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "first_failure": self.first_failure.to_dict() if self.first_failure else None,
            "checked": self.checked,
            "failures": [f.to_dict() for f in self.failures],
        }


def expected_positions(manifest, client_id: int) -> list[tuple[int, int]] | None:
    """Coordinates a completed run writes for ``client_id``, if the manifest says.

    Every chain, the server's included, has one entry per (round, epoch).
    """
    mode = manifest.mode
    if "n_global" not in mode or "n_client" not in mode:
        return None
    n_global, n_client = mode["n_global"], mode["n_client"]
    return [(r, e) for r in range(1, n_global + 1) for e in range(1, n_client + 1)]


def verify_chain(store, client_id: int, *, full_scan: bool = False) -> VerifyOutcome:
    """Recompute the client's chain from stored blobs and compare with stored hashes.

    Per record, in (round, epoch) order: the frame must read back intact
    (corrupt-record); the stored hash must equal SHA-256 of the blob and the
    stored predecessor (blob-hash-mismatch); the stored predecessor must equal
    the chain recomputed from the first blob (chain-link-mismatch). Expected
    coordinates with no record are missing-record.
    """
    entries = store.entries(client_id)
    intact = [e for e in entries if not e.damaged]
    if any(e.hash is None for e in intact):
        raise NotVerifiableOfflineError(f"client {client_id} has records without hashes; nothing to verify")
    if any(e.blob_len is None for e in intact):
        raise NotVerifiableOfflineError(
            f"client {client_id} has hash-only records; offline verification needs blobs, use replay"
        )
    by_pos = {e.position: e for e in entries}
    expected = expected_positions(store.manifest, client_id) or []
    recovery = getattr(store, "recovery", {}).get(client_id)
    # positions lost behind an unreadable frame are corrupt, not merely missing
    cut = recovery is not None and recovery.corrupt_offset is not None
    failures: list[Failure] = []
    checked = 0
    stored_prev: HashSignature | None = None
    recomputed_prev: HashSignature | None = None
    blind = False  # predecessor unreadable: the next link cannot be checked
    for pos in sorted(set(by_pos) | set(expected)):
        entry = by_pos.get(pos)
        if entry is None:
            lost = cut and (not entries or pos > entries[-1].position)
            failures.append(Failure(client_id, *pos, CORRUPT_RECORD if lost else MISSING_RECORD))
            if not full_scan:
                break
            blind = True
            continue
        checked += 1
        try:
            record = store.read(client_id, entry)
        except CorruptRecordError:
            failures.append(Failure(client_id, *pos, CORRUPT_RECORD))
            if not full_scan:
                break
            blind = True
            continue
        if blind:
            stored_prev = recomputed_prev = record.hash
            blind = False
            continue
        local = compute_chain_hash(record.param_blob, stored_prev)
        recomputed = compute_chain_hash(record.param_blob, recomputed_prev)
        reason = None
        if local != record.hash:
            reason = BLOB_HASH_MISMATCH
        elif stored_prev != recomputed_prev:
            reason = CHAIN_LINK_MISMATCH
        if reason is not None:
            failures.append(Failure(client_id, *pos, reason))
            if not full_scan:
                break
        stored_prev, recomputed_prev = record.hash, recomputed
    return VerifyOutcome(not failures, failures[0] if failures else None, checked, tuple(failures))


# -- replay -------------------------------------------------------------------


@dataclass(frozen=True)
class AuditOutcome:
    matched: bool
    compared: int
    first_divergence: tuple[int, int, int] | None = None

    def to_dict(self) -> dict:
        div = self.first_divergence
        return {
            "matched": self.matched,
            "compared": self.compared,
            "first_divergence": None if div is None else {"client_id": div[0], "round": div[1], "epoch": div[2]},
        }


def compare_ledgers(produced: dict, stored: dict) -> AuditOutcome:
    """Compare two ``{(client, round, epoch): hash}`` maps in chronological order."""
    keys = sorted(set(produced) | set(stored), key=lambda k: (k[1], k[2], k[0]))
    for key in keys:
        if key not in produced or key not in stored or produced[key] != stored[key]:
            return AuditOutcome(False, len(keys), key)
    return AuditOutcome(True, len(keys), None)


def stored_ledger(store, *, after: tuple[int, int] | None = None) -> dict:
    out = {}
    for c in store.client_ids:
        for e in store.entries(c):
            if after is None or e.position > after:
                out[(c, e.round, e.epoch)] = e.hash
    return out


def _check_compatible(config, store) -> None:
    manifest = store.manifest
    mode = manifest.mode
    expected_ids = ([0] if config.record_global else []) + list(range(1, config.num_clients + 1))
    problems = []
    if sorted(manifest.client_ids) != expected_ids:
        problems.append(f"store clients {sorted(manifest.client_ids)} vs config clients {expected_ids}")
    for key in ("n_global", "n_client"):
        if key in mode and mode[key] != getattr(config, key):
            problems.append(f"store {key}={mode[key]} vs config {key}={getattr(config, key)}")
    if not mode.get("hash", False):
        problems.append("store holds no hash chain")
    if problems:
        raise AuditInputError("config does not match store: " + "; ".join(problems))


def replay_verify(config, store) -> AuditOutcome:
    """Re-run training with hashing into memory and compare every link with the store."""
    from .fl import ProvenanceMode, run_federated

    _check_compatible(config, store)
    sink = MemorySink()
    replay_cfg = replace(config, provenance_mode=ProvenanceMode(snapshot=False, hash=True))
    run_federated(replay_cfg, sink=sink)
    return compare_ledgers(sink.ledger(), stored_ledger(store))


# -- rollback -------------------------------------------------------------------


def rollback(store, client_id: int, round: int, epoch: int) -> ParameterSet:
    record = store.get(client_id, round, epoch)
    if record.param_blob is None:
        raise NoSnapshotError(f"client {client_id} round {round} epoch {epoch} was recorded without a snapshot")
    return decode(record.param_blob)


def resume_verify(config, store, round: int, epoch: int) -> AuditOutcome:
    """Roll every client back to (round, epoch), train forward, compare all later links."""
    from .fl import ProvenanceMode, resume_federated

    _check_compatible(config, store)
    at = (round, epoch)
    models = {c: rollback(store, c, round, epoch) for c in range(1, config.num_clients + 1)}
    sink = MemorySink()
    for c in store.client_ids:
        base = [e for e in store.entries(c) if e.position <= at]
        if base:
            sink.seed(SnapshotRecord(c, base[-1].round, base[-1].epoch, None, base[-1].hash))
    recorder = Recorder(sink, ProvenanceMode(snapshot=False, hash=True))

    def hook(c, r, e, params):
        if (r, e) > at:
            recorder(c, r, e, params)

    resume_federated(config, models, round, epoch, hook)
    produced = {k: v for k, v in sink.ledger().items() if (k[1], k[2]) > at}
    return compare_ledgers(produced, stored_ledger(store, after=at))


def lineage(store, client_id: int) -> list[dict]:
    return [
        {
            "round": e.round,
            "epoch": e.epoch,
            "hash": e.hash.hex if e.hash is not None else None,
            "blob_bytes": e.blob_len,
        }
        for e in store.entries(client_id)
    ]

