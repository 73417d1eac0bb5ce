"""Embedded append-only provenance store: one framed log per client plus a manifest.

Log file: ``b"FPV1"`` followed by frames. Frame (integers little-endian)::

    u32 total_len | u32 client_id | u32 round | u32 epoch | u8 flags
    [32-byte hash]                       if flags & 2
    [u64 blob_len | blob]                if flags & 1
    u32 crc32 over every preceding byte of the frame

``total_len`` counts the whole frame, itself and the CRC included. The CRC only
catches torn or damaged frames; tamper evidence comes from the hash chain.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import (
    CorruptRecordError,
    NotFoundError,
    OrderingError,
    StorageError,
    UsageError,
    VersionMismatchError,
)
from .records import HASH_SIZE, HashSignature, SnapshotRecord

FORMAT_VERSION = 1
MAGIC = b"FPV1"
MANIFEST_NAME = "manifest.json"

FLAG_BLOB = 0x01
FLAG_HASH = 0x02

_HEADER = struct.Struct("<IIIIB")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
HEADER_SIZE = _HEADER.size
MIN_FRAME = HEADER_SIZE + 4


class StoreExistsError(StorageError):
    """Refusing to create a store over existing content."""


def frame_size(blob_len: int | None, has_hash: bool) -> int:
    size = MIN_FRAME
    if has_hash:
        size += HASH_SIZE
    if blob_len is not None:
        size += 8 + blob_len
    return size


def encode_frame(record: SnapshotRecord) -> list[bytes | memoryview]:
    """Frame chunks in file order; the blob is passed through uncopied."""
    flags = (FLAG_BLOB if record.param_blob is not None else 0) | (FLAG_HASH if record.hash is not None else 0)
    blob_len = None if record.param_blob is None else len(record.param_blob)
    total = frame_size(blob_len, record.hash is not None)
    if total > 0xFFFFFFFF:
        raise StorageError(f"frame of {total} bytes exceeds the 4 GiB frame limit")
    chunks: list[bytes | memoryview] = [
        _HEADER.pack(total, record.client_id, record.round, record.epoch, flags)
    ]
    if record.hash is not None:
        chunks.append(record.hash.raw)
    if record.param_blob is not None:
        chunks.append(_U64.pack(blob_len))
        chunks.append(record.param_blob)
    crc = 0
    for chunk in chunks:
        crc = zlib.crc32(chunk, crc)
    chunks.append(_U32.pack(crc))
    return chunks


def decode_frame(frame: bytes, *, path=None, offset=None) -> SnapshotRecord:
    """Parse one complete frame, validating its checksum and internal lengths."""

    def corrupt(why: str, coords=None):
        return CorruptRecordError(f"{path}: frame at offset {offset}: {why}", path=path, offset=offset, coords=coords)

    if len(frame) < MIN_FRAME:
        raise corrupt(f"frame of {len(frame)} bytes is shorter than the minimum {MIN_FRAME}")
    total, client_id, rnd, epoch, flags = _HEADER.unpack_from(frame)
    coords = (client_id, rnd, epoch)
    if total != len(frame):
        raise corrupt(f"declared length {total} but {len(frame)} bytes present", coords)
    (crc,) = _U32.unpack_from(frame, total - 4)
    if zlib.crc32(memoryview(frame)[: total - 4]) != crc:
        raise corrupt("checksum mismatch", coords)
    if flags & ~(FLAG_BLOB | FLAG_HASH) or not flags:
        raise corrupt(f"invalid flags {flags:#04x}", coords)
    pos = HEADER_SIZE
    digest = None
    if flags & FLAG_HASH:
        digest = HashSignature(frame[pos : pos + HASH_SIZE])
        pos += HASH_SIZE
    blob = None
    if flags & FLAG_BLOB:
        if pos + 8 > total - 4:
            raise corrupt("blob length field overruns frame", coords)
        (blob_len,) = _U64.unpack_from(frame, pos)
        pos += 8
        blob = bytes(frame[pos : pos + blob_len])
        pos += blob_len
    if pos != total - 4:
        raise corrupt(f"fields end at {pos}, checksum expected at {total - 4}", coords)
    if rnd < 1 or epoch < 1:
        raise corrupt("round and epoch must be positive", coords)
    return SnapshotRecord(client_id, rnd, epoch, blob, digest)


@dataclass
class Manifest:
    config_digest: str
    client_ids: list[int]
    expected_counts: dict[int, int] = field(default_factory=dict)
    mode: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        data = asdict(self)
        data["expected_counts"] = {str(k): v for k, v in sorted(self.expected_counts.items())}
        return json.dumps(data, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Manifest:
        data = json.loads(text)
        return cls(
            config_digest=data["config_digest"],
            client_ids=[int(c) for c in data["client_ids"]],
            expected_counts={int(k): int(v) for k, v in data.get("expected_counts", {}).items()},
            mode=data.get("mode", {}),
            format_version=int(data["format_version"]),
        )


@dataclass(frozen=True, slots=True)
class IndexEntry:
    round: int
    epoch: int
    offset: int
    length: int
    flags: int
    hash: HashSignature | None
    blob_len: int | None
    damaged: bool = False

    @property
    def position(self) -> tuple[int, int]:
        return (self.round, self.epoch)


@dataclass(frozen=True, slots=True)
class Recovery:
    """What ``open`` found in one client log."""

    records: int
    torn_bytes: int
    damaged: int = 0
    corrupt_offset: int | None = None


def log_name(client_id: int) -> str:
    return f"client_{client_id}.log"


class ProvenanceStore:
    """File-backed ledger. Handles from :meth:`create` write; handles from :meth:`open` only read."""

    def __init__(self, root: Path, manifest: Manifest, writable: bool, strict: bool = True):
        self.root = Path(root)
        self.manifest = manifest
        self.writable = writable
        self.strict = strict
        self.bytes_written = 0
        self.recovery: dict[int, Recovery] = {}
        self._index: dict[int, list[IndexEntry]] = {c: [] for c in manifest.client_ids}
        self._keys: dict[tuple[int, int, int], IndexEntry] = {}
        self._files: dict[int, object] = {}
        self._locks = {c: threading.Lock() for c in manifest.client_ids}
        self._index_lock = threading.Lock()
        self._closed = False

    @classmethod
    def create(cls, path, manifest: Manifest) -> ProvenanceStore:
        root = Path(path)
        if root.exists() and (not root.is_dir() or any(root.iterdir())):
            raise StoreExistsError(f"{root} already exists and is not empty; refusing to overwrite")
        if manifest.format_version != FORMAT_VERSION:
            raise VersionMismatchError(f"cannot create a store with format version {manifest.format_version}")
        root.mkdir(parents=True, exist_ok=True)
        tmp = root / (MANIFEST_NAME + ".tmp")
        tmp.write_text(manifest.to_json(), encoding="utf-8")
        os.replace(tmp, root / MANIFEST_NAME)
        store = cls(root, manifest, writable=True)
        for c in manifest.client_ids:
            fh = open(root / log_name(c), "xb")
            fh.write(MAGIC)
            fh.flush()
            store._files[c] = fh
        return store

    @classmethod
    def open(cls, path, *, strict: bool = True) -> ProvenanceStore:
        """Rebuild the index by scanning every log.

        A torn final frame is skipped and reported in :attr:`recovery`. A
        complete frame that fails validation raises :class:`CorruptRecordError`
        unless ``strict`` is false, in which case it is indexed as damaged (or,
        if its header is unusable, scanning of that log stops there).
        """
        root = Path(path)
        manifest_path = root / MANIFEST_NAME
        if not manifest_path.is_file():
            raise StorageError(f"{root} has no {MANIFEST_NAME}; not a provenance store")
        try:
            manifest = Manifest.from_json(manifest_path.read_text(encoding="utf-8"))
        except (ValueError, KeyError, TypeError) as exc:
            raise StorageError(f"unreadable manifest {manifest_path}: {exc}") from None
        if manifest.format_version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"{root} has format version {manifest.format_version}, this code reads {FORMAT_VERSION}"
            )
        store = cls(root, manifest, writable=False, strict=strict)
        for c in manifest.client_ids:
            store._rebuild(c)
        return store

    def _rebuild(self, client_id: int) -> None:
        path = self.root / log_name(client_id)
        if not path.is_file():
            raise StorageError(f"missing log {path}")
        entries: list[IndexEntry] = []
        torn = damaged = 0
        corrupt_at = None
        with open(path, "rb") as fh:
            size = os.fstat(fh.fileno()).st_size
            head = fh.read(len(MAGIC))
            if head != MAGIC:
                if MAGIC.startswith(head):
                    self._install(client_id, entries, Recovery(0, len(head)))
                    return
                raise CorruptRecordError(f"{path}: bad magic {head!r}", path=path, offset=0)
            pos = len(MAGIC)
            while pos < size:
                remaining = size - pos
                if remaining < 4:
                    torn = remaining
                    break
                (total,) = _U32.unpack(fh.read(4))
                if total > remaining:
                    torn = remaining
                    break
                try:
                    if total < MIN_FRAME:
                        raise CorruptRecordError(
                            f"{path}: frame at offset {pos} declares {total} bytes", path=path, offset=pos
                        )
                    record = decode_frame(_U32.pack(total) + fh.read(total - 4), path=path, offset=pos)
                    entry = self._entry(record, pos, total)
                except CorruptRecordError as exc:
                    if self.strict or exc.coords is None:
                        if self.strict:
                            raise
                        corrupt_at = pos
                        break
                    _, rnd, epoch = exc.coords
                    entry = IndexEntry(rnd, epoch, pos, total, 0, None, None, damaged=True)
                    record = None
                coords = (client_id, entry.round, entry.epoch)
                problem = None
                if record is not None and record.client_id != client_id:
                    problem = f"belongs to client {record.client_id}"
                elif entries and entry.position <= entries[-1].position:
                    problem = "is out of order"
                if problem:
                    if self.strict:
                        raise CorruptRecordError(
                            f"{path}: frame at offset {pos} {problem}", path=path, offset=pos, coords=coords
                        )
                    corrupt_at = pos
                    break
                damaged += entry.damaged
                entries.append(entry)
                pos += total
        self._install(client_id, entries, Recovery(len(entries), torn, damaged, corrupt_at))

    def _install(self, client_id, entries, recovery):
        self._index[client_id] = entries
        for e in entries:
            self._keys[(client_id, e.round, e.epoch)] = e
        self.recovery[client_id] = recovery

    @staticmethod
    def _entry(record: SnapshotRecord, offset: int, length: int) -> IndexEntry:
        flags = (FLAG_BLOB if record.param_blob is not None else 0) | (FLAG_HASH if record.hash is not None else 0)
        blob_len = None if record.param_blob is None else len(record.param_blob)
        return IndexEntry(record.round, record.epoch, offset, length, flags, record.hash, blob_len)

    # -- writing -----------------------------------------------------------

    def append(self, record: SnapshotRecord, *, flush: bool = True) -> None:
        if not self.writable or self._closed:
            raise UsageError(f"store {self.root} is not open for writing")
        c = record.client_id
        if c not in self._locks:
            raise StorageError(f"client {c} is not listed in the manifest of {self.root}")
        with self._locks[c]:
            entries = self._index[c]
            if entries and record.position <= entries[-1].position:
                raise OrderingError(
                    f"client {c}: record at {record.position} does not follow {entries[-1].position}"
                )
            fh = self._files[c]
            offset = fh.tell()
            chunks = encode_frame(record)
            try:
                for chunk in chunks:
                    fh.write(chunk)
                if flush:
                    fh.flush()
            except OSError as exc:
                raise StorageError(f"write to {fh.name} failed: {exc}") from exc
            length = sum(len(chunk) for chunk in chunks)
            entry = self._entry(record, offset, length)
            with self._index_lock:
                entries.append(entry)
                self._keys[record.coords] = entry
                self.bytes_written += length

    def flush(self, client_id: int | None = None) -> None:
        targets = self._files.items() if client_id is None else [(client_id, self._files[client_id])]
        for c, fh in targets:
            with self._locks[c]:
                try:
                    fh.flush()
                except OSError as exc:
                    raise StorageError(f"flush of {fh.name} failed: {exc}") from exc

    def close(self) -> None:
        if self._closed:
            return
        if self.writable:
            self.flush()
            for fh in self._files.values():
                fh.close()
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- reading -----------------------------------------------------------

    @property
    def client_ids(self) -> list[int]:
        return list(self.manifest.client_ids)

    def entries(self, client_id: int) -> list[IndexEntry]:
        with self._index_lock:
            return list(self._index.get(client_id, ()))

    def record_count(self, client_id: int | None = None) -> int:
        with self._index_lock:
            if client_id is None:
                return sum(len(v) for v in self._index.values())
            return len(self._index.get(client_id, ()))

    def latest_hash(self, client_id: int) -> HashSignature | None:
        with self._index_lock:
            entries = self._index.get(client_id)
            return entries[-1].hash if entries else None

    def last_coords(self, client_id: int) -> tuple[int, int] | None:
        with self._index_lock:
            entries = self._index.get(client_id)
            return entries[-1].position if entries else None

    def read(self, client_id: int, entry: IndexEntry) -> SnapshotRecord:
        path = self.root / log_name(client_id)
        if entry.damaged:
            raise CorruptRecordError(
                f"{path}: frame at offset {entry.offset} failed validation when the store was opened",
                path=path, offset=entry.offset, coords=(client_id, entry.round, entry.epoch),
            )
        if self.writable:
            self.flush(client_id)
        with open(path, "rb") as fh:
            fh.seek(entry.offset)
            frame = fh.read(entry.length)
        if len(frame) != entry.length:
            raise CorruptRecordError(
                f"{path}: frame at offset {entry.offset} is truncated",
                path=path, offset=entry.offset, coords=(client_id, entry.round, entry.epoch),
            )
        record = decode_frame(frame, path=path, offset=entry.offset)
        if record.coords != (client_id, entry.round, entry.epoch):
            raise CorruptRecordError(
                f"{path}: frame at offset {entry.offset} changed coordinates to {record.coords}",
                path=path, offset=entry.offset, coords=(client_id, entry.round, entry.epoch),
            )
        return record

    def get(self, client_id: int, round: int, epoch: int) -> SnapshotRecord:
        entry = self._keys.get((client_id, round, epoch))
        if entry is None:
            raise NotFoundError(f"no record for client {client_id} at round {round}, epoch {epoch}")
        return self.read(client_id, entry)

    def scan(self, client_id: int):
        """Yield the client's records in (round, epoch) order, checksum-validated."""
        for entry in self.entries(client_id):
            yield self.read(client_id, entry)

    def log_path(self, client_id: int) -> Path:
        return self.root / log_name(client_id)

    def log_bytes(self, client_id: int | None = None) -> int:
        ids = self.client_ids if client_id is None else [client_id]
        return sum(self.log_path(c).stat().st_size for c in ids)
