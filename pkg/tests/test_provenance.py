from __future__ import annotations

import hashlib
import shutil
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedprov.errors import AuditInputError, NoSnapshotError, NotVerifiableOfflineError, OrderingError
from fedprov.fl import ProvenanceMode, run_federated
from fedprov.model import ModelSpec, init_model
from fedprov.params import canonical_encode
from fedprov.provenance import (
    BLOB_HASH_MISMATCH,
    CHAIN_LINK_MISMATCH,
    CORRUPT_RECORD,
    MISSING_RECORD,
    MemorySink,
    chain_hash_params,
    compute_chain_hash,
    lineage,
    record_snapshot,
    replay_verify,
    resume_verify,
    rollback,
    verify_chain,
)
from fedprov.records import HashSignature, SnapshotRecord
from fedprov.store import ProvenanceStore
from fedprov.tamper import tamper
from sha256_oracle import sha256
from storeutil import manifest

FIPS = {
    b"": "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
    b"abc": "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad",
    b"".join(bytes(range(97 + i, 101 + i)) for i in range(14)):
        "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1",
}


@pytest.mark.parametrize("message", list(FIPS))
def test_fips_vectors(message):
    assert sha256(message).hex() == FIPS[message]
    assert compute_chain_hash(message).hex == FIPS[message]


@given(st.binary(max_size=300), st.one_of(st.none(), st.binary(min_size=32, max_size=32)))
@settings(max_examples=100, deadline=None)
def test_chain_hash_matches_oracle(blob, prev):
    expected = sha256(blob + (prev or b""))
    assert compute_chain_hash(blob, HashSignature(prev) if prev else None).raw == expected


def test_streaming_hash_equals_blob_hash():
    params = init_model(ModelSpec((7, 5, 3)), 1)
    prev = compute_chain_hash(b"seed")
    assert chain_hash_params(params, prev) == compute_chain_hash(canonical_encode(params), prev)
    assert chain_hash_params(params) == compute_chain_hash(canonical_encode(params))


def test_record_snapshot_links():
    sink = MemorySink(keep_blobs=True)
    mode = ProvenanceMode(snapshot=True, hash=True)
    p1, p2 = init_model(ModelSpec((2, 2)), 1), init_model(ModelSpec((2, 2)), 2)
    h1 = record_snapshot(sink, 1, 1, 1, p1, mode)
    assert h1.raw == hashlib.sha256(canonical_encode(p1)).digest()
    h2 = record_snapshot(sink, 1, 1, 2, p2, mode)
    assert h2.raw == hashlib.sha256(canonical_encode(p2) + h1.raw).digest()
    assert sink.records[1][1].param_blob == canonical_encode(p2)
    with pytest.raises(OrderingError):
        record_snapshot(sink, 1, 1, 2, p2, mode)
    assert record_snapshot(sink, 1, 5, 5, p2, ProvenanceMode()) is None
    snap_only = record_snapshot(sink, 2, 1, 1, p1, ProvenanceMode(snapshot=True))
    assert snap_only is None and sink.records[2][0].hash is None


@pytest.fixture
def run_store(config_factory):
    cfg = config_factory(clients=2, rounds=2, epochs=2)
    run_federated(cfg)
    return cfg


def fresh_copy(cfg, tmp_path, name="copy"):
    dst = tmp_path / name
    shutil.copytree(cfg.store_path, dst)
    return dst


def test_untampered_store_verifies(run_store):
    store = ProvenanceStore.open(run_store.store_path)
    for c in store.client_ids:
        outcome = verify_chain(store, c)
        assert outcome.ok and outcome.first_failure is None
        assert outcome.checked == 4


def test_blob_tamper_is_localized(run_store, tmp_path):
    path = fresh_copy(run_store, tmp_path)
    tamper(path, 1, 2, 1, offset=12, xor=0x01, fix_crc=True)
    store = ProvenanceStore.open(path)
    outcome = verify_chain(store, 1)
    assert (outcome.first_failure.round, outcome.first_failure.epoch) == (2, 1)
    assert outcome.first_failure.reason == BLOB_HASH_MISMATCH
    assert outcome.checked == 3
    full = verify_chain(store, 1, full_scan=True)
    assert [(f.round, f.epoch, f.reason) for f in full.failures] == [
        (2, 1, BLOB_HASH_MISMATCH),
        (2, 2, CHAIN_LINK_MISMATCH),
    ]
    assert all(verify_chain(store, c).ok for c in (0, 2))


def test_raw_byte_flip_is_a_corrupt_record(run_store, tmp_path):
    path = fresh_copy(run_store, tmp_path)
    tamper(path, 2, 1, 2, offset=0, xor=0x80)
    store = ProvenanceStore.open(path, strict=False)
    outcome = verify_chain(store, 2)
    assert outcome.first_failure.to_dict() == {"client_id": 2, "round": 1, "epoch": 2, "reason": CORRUPT_RECORD}


def test_hash_tamper(run_store, tmp_path):
    path = fresh_copy(run_store, tmp_path)
    tamper(path, 0, 1, 2, offset=31, xor=0xFF, field="hash", fix_crc=True)
    full = verify_chain(ProvenanceStore.open(path), 0, full_scan=True)
    assert [(f.round, f.epoch, f.reason) for f in full.failures] == [
        (1, 2, BLOB_HASH_MISMATCH),
        (2, 1, BLOB_HASH_MISMATCH),
    ]


def test_missing_record(tmp_path):
    mf = manifest((1,), n_global=1, n_client=3)
    blobs = [b"one", b"two", b"three"]
    hashes, prev = [], None
    for b in blobs:
        prev = compute_chain_hash(b, prev)
        hashes.append(prev)
    with ProvenanceStore.create(tmp_path / "s", mf) as store:
        store.append(SnapshotRecord(1, 1, 1, blobs[0], hashes[0]))
        store.append(SnapshotRecord(1, 1, 3, blobs[2], hashes[2]))
    outcome = verify_chain(ProvenanceStore.open(tmp_path / "s"), 1, full_scan=True)
    assert [(f.epoch, f.reason) for f in outcome.failures] == [(2, MISSING_RECORD)]


@pytest.mark.parametrize("mode", ["hash-sync", "snapshot-sync"])
def test_incomplete_modes_cannot_be_verified_offline(config_factory, mode):
    cfg = config_factory(mode=mode)
    run_federated(cfg)
    with pytest.raises(NotVerifiableOfflineError):
        verify_chain(ProvenanceStore.open(cfg.store_path), 1)


def test_replay_matches_and_counts(run_store):
    outcome = replay_verify(run_store, ProvenanceStore.open(run_store.store_path))
    assert outcome.matched and outcome.compared == (2 + 1) * 2 * 2


def test_replay_with_other_seed_diverges_first_at_round_one(run_store):
    outcome = replay_verify(replace(run_store, run_seed=999), ProvenanceStore.open(run_store.store_path))
    assert not outcome.matched
    assert outcome.first_divergence[1:] == (1, 1)


def test_replay_rejects_incompatible_config(run_store):
    store = ProvenanceStore.open(run_store.store_path)
    with pytest.raises(AuditInputError):
        replay_verify(replace(run_store, num_clients=1, dataset_spec=replace(run_store.dataset_spec)), store)
    with pytest.raises(AuditInputError):
        replay_verify(replace(run_store, n_client=3), store)


def test_replay_works_on_hash_only_store(config_factory):
    cfg = config_factory(mode="hash-async")
    run_federated(cfg)
    assert replay_verify(cfg, ProvenanceStore.open(cfg.store_path)).matched


def test_rollback_last_global_equals_final_model(config_factory):
    cfg = config_factory()
    result = run_federated(cfg)
    store = ProvenanceStore.open(cfg.store_path)
    assert rollback(store, 0, cfg.n_global, cfg.n_client) == result.final_global_model


def test_rollback_client_states(config_factory):
    cfg = config_factory()
    seen = {}
    run_federated(cfg, hook=lambda c, r, e, p: seen.__setitem__((c, r, e), p))
    store = ProvenanceStore.open(cfg.store_path)
    for (c, r, e), params in seen.items():
        assert canonical_encode(rollback(store, c, r, e)) == canonical_encode(params)


def test_rollback_needs_a_snapshot(config_factory):
    cfg = config_factory(mode="hash-sync")
    run_federated(cfg)
    with pytest.raises(NoSnapshotError):
        rollback(ProvenanceStore.open(cfg.store_path), 1, 1, 1)


@pytest.mark.parametrize("at", [(1, 1), (1, 2), (2, 1), (2, 2)])
def test_resume_reproduces_later_links(run_store, at):
    outcome = resume_verify(run_store, ProvenanceStore.open(run_store.store_path), *at)
    assert outcome.matched


def test_lineage_lists_every_record(run_store):
    rows = lineage(ProvenanceStore.open(run_store.store_path), 1)
    assert [(r["round"], r["epoch"]) for r in rows] == [(1, 1), (1, 2), (2, 1), (2, 2)]
    assert all(len(r["hash"]) == 64 and r["hash"] == r["hash"].lower() for r in rows)


@given(st.data())
@settings(max_examples=40, deadline=None)
def test_single_bit_change_propagates_to_every_later_link(data):
    blobs = data.draw(st.lists(st.binary(min_size=1, max_size=40), min_size=1, max_size=6))
    j = data.draw(st.integers(0, len(blobs) - 1))
    bit = data.draw(st.integers(0, 8 * len(blobs[j]) - 1))
    changed = list(blobs)
    raw = bytearray(changed[j])
    raw[bit // 8] ^= 1 << (bit % 8)
    changed[j] = bytes(raw)

    def chain(seq):
        out, prev = [], None
        for b in seq:
            prev = compute_chain_hash(b, prev)
            out.append(prev)
        return out

    a, b = chain(blobs), chain(changed)
    assert a[:j] == b[:j]
    assert all(x != y for x, y in zip(a[j:], b[j:]))
