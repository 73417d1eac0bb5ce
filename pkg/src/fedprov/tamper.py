"""Deliberate corruption of stored records, for tamper-detection tests and demos."""

from __future__ import annotations

import struct
import zlib

from .errors import ConfigError, CorruptRecordError, NoSnapshotError, NotFoundError
from .records import HASH_SIZE
from .store import FLAG_HASH, HEADER_SIZE, ProvenanceStore, log_name


def tamper(store_path, client_id: int, round: int, epoch: int, offset: int, xor: int,
           *, field: str = "blob", fix_crc: bool = False) -> int:
    """XOR one byte of a record's blob (or hash) in place; return its file offset.

    With ``fix_crc`` the frame checksum is recomputed, so only the hash chain
    can reveal the change; otherwise exactly one byte of the log differs.
    """
    if not 1 <= xor <= 255:
        raise ConfigError(f"xor value must be in 1..255, got {xor}")
    if field not in ("blob", "hash"):
        raise ConfigError(f"field must be 'blob' or 'hash', got {field!r}")
    store = ProvenanceStore.open(store_path, strict=False)
    if client_id not in store.client_ids:
        raise NotFoundError(f"store has no client {client_id}")
    entry = next((e for e in store.entries(client_id) if e.position == (round, epoch)), None)
    if entry is None:
        raise NotFoundError(f"no record for client {client_id} at round {round}, epoch {epoch}")
    if entry.damaged:
        raise CorruptRecordError(f"record ({round}, {epoch}) of client {client_id} is already damaged",
                                 coords=(client_id, round, epoch))
    hash_len = HASH_SIZE if entry.flags & FLAG_HASH else 0
    if field == "hash":
        if not hash_len:
            raise NotFoundError("record has no hash to tamper with")
        start, length = entry.offset + HEADER_SIZE, HASH_SIZE
    else:
        if entry.blob_len is None:
            raise NoSnapshotError("record has no blob to tamper with")
        start, length = entry.offset + HEADER_SIZE + hash_len + 8, entry.blob_len
    if not 0 <= offset < length:
        raise ConfigError(f"offset {offset} is outside the {field} ({length} bytes)")
    target = start + offset
    path = store.root / log_name(client_id)
    with open(path, "r+b") as fh:
        fh.seek(target)
        (byte,) = fh.read(1)
        fh.seek(target)
        fh.write(bytes([byte ^ xor]))
        if fix_crc:
            fh.seek(entry.offset)
            body = fh.read(entry.length - 4)
            fh.write(struct.pack("<I", zlib.crc32(body)))
    return target
