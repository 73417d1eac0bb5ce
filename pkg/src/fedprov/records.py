"""Ledger record types shared by the store, pipeline and provenance modules."""

from __future__ import annotations

from dataclasses import dataclass

HASH_SIZE = 32


@dataclass(frozen=True, slots=True)
class HashSignature:
    raw: bytes

    def __post_init__(self):
        if len(self.raw) != HASH_SIZE:
            raise ValueError(f"hash signature must be {HASH_SIZE} bytes, got {len(self.raw)}")
        object.__setattr__(self, "raw", bytes(self.raw))

    @property
    def hex(self) -> str:
        return self.raw.hex()

    @classmethod
    def from_hex(cls, text: str) -> HashSignature:
        if len(text) != 2 * HASH_SIZE or text != text.lower():
            raise ValueError(f"expected 64 lowercase hex characters, got {text!r}")
        return cls(bytes.fromhex(text))

    def __str__(self) -> str:
        return self.hex


@dataclass(frozen=True, slots=True)
class SnapshotRecord:
    """One ledger row. ``client_id`` 0 is reserved for the aggregated global model."""

    client_id: int
    round: int
    epoch: int
    param_blob: bytes | None = None
    hash: HashSignature | None = None

    def __post_init__(self):
        if self.param_blob is None and self.hash is None:
            raise ValueError("a record needs a parameter blob, a hash, or both")
        if self.client_id < 0 or self.round < 1 or self.epoch < 1:
            raise ValueError(f"invalid coordinates {self.coords}")

    @property
    def coords(self) -> tuple[int, int, int]:
        return (self.client_id, self.round, self.epoch)

    @property
    def position(self) -> tuple[int, int]:
        return (self.round, self.epoch)
