"""Parameter sets and their canonical byte encoding.

Layout, per tensor in ascending name order (all integers little-endian)::

    u32 name_len | name (UTF-8) | u32 rank | u32 dim * rank | f64 values, row-major

The empty set encodes to ``b""``. Two sets compare equal iff their encodings do.
"""

from __future__ import annotations

import struct
from collections.abc import Iterable, Iterator, Mapping

import numpy as np

from .errors import EncodingError, ModelError

_U32 = struct.Struct("<I")


class ParameterSet:
    """Immutable, name-ordered collection of float64 tensors.

    Arrays are taken without copying when already contiguous float64 and are
    marked read-only in place.
    """

    __slots__ = ("_tensors", "_finite")

    def __init__(self, tensors: Mapping[str, object] | Iterable[tuple[str, object]] = ()):
        pairs = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
        names = [name for name, _ in pairs]
        if len(set(names)) != len(names):
            raise ModelError(f"duplicate tensor names in {names}")
        ordered = []
        for name, values in sorted(pairs, key=lambda kv: kv[0]):
            if not isinstance(name, str) or not name:
                raise ModelError(f"tensor name must be a non-empty string, got {name!r}")
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim == 0 or 0 in arr.shape:
                raise ModelError(f"tensor {name!r} must have positive dimensions, got {arr.shape}")
            arr = np.ascontiguousarray(arr)
            # freezes the caller's array too when no copy was needed
            arr.flags.writeable = False
            ordered.append((name, arr))
        self._tensors: tuple[tuple[str, np.ndarray], ...] = tuple(ordered)
        self._finite: bool | None = None

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self._tensors]

    def items(self) -> tuple[tuple[str, np.ndarray], ...]:
        return self._tensors

    def __getitem__(self, name: str) -> np.ndarray:
        for key, arr in self._tensors:
            if key == name:
                return arr
        raise KeyError(name)

    def __contains__(self, name: object) -> bool:
        return any(key == name for key, _ in self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @property
    def num_parameters(self) -> int:
        return sum(arr.size for _, arr in self._tensors)

    def structure(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((name, arr.shape) for name, arr in self._tensors)

    def is_finite(self) -> bool:
        if self._finite is None:
            self._finite = all(bool(np.isfinite(arr).all()) for _, arr in self._tensors)
        return self._finite

    def to_dict(self) -> dict[str, np.ndarray]:
        """Writable copies of every tensor."""
        return {name: arr.copy() for name, arr in self._tensors}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        if self.structure() != other.structure():
            return False
        # bitwise comparison so that -0.0 != 0.0, matching encoding equality
        return all(
            np.array_equal(a.view(np.uint64), b.view(np.uint64))
            for (_, a), (_, b) in zip(self._tensors, other._tensors)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        shapes = ", ".join(f"{n}{list(a.shape)}" for n, a in self._tensors)
        return f"ParameterSet({shapes})"


def iter_encoded(params: ParameterSet) -> Iterator[bytes | memoryview]:
    """Yield the canonical encoding in chunks without joining them."""
    if not params.is_finite():
        bad = next(name for name, arr in params.items() if not np.isfinite(arr).all())
        raise EncodingError(f"tensor {bad!r} contains non-finite values")
    for name, arr in params.items():
        raw = name.encode("utf-8")
        header = [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        header.extend(_U32.pack(d) for d in arr.shape)
        yield b"".join(header)
        yield memoryview(arr.astype("<f8", copy=False)).cast("B")


def canonical_encode(params: ParameterSet) -> bytes:
    return b"".join(iter_encoded(params))


def encoded_size(params: ParameterSet) -> int:
    size = 0
    for name, arr in params.items():
        size += 8 + len(name.encode("utf-8")) + 4 * arr.ndim + 8 * arr.size
    return size


def decode(blob: bytes | memoryview) -> ParameterSet:
    """Inverse of :func:`canonical_encode`; rejects anything it would not produce."""
    buf = memoryview(blob)
    pos = 0
    tensors = []
    prev_name = None

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(buf):
            raise EncodingError(f"truncated encoding at byte {pos} (need {n} more)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = _U32.unpack(take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError(f"tensor name is not UTF-8: {exc}") from None
        if prev_name is not None and name <= prev_name:
            raise EncodingError(f"tensor {name!r} out of order after {prev_name!r}")
        (rank,) = _U32.unpack(take(4))
        if rank == 0:
            raise EncodingError(f"tensor {name!r} has rank 0")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        if count == 0:
            raise EncodingError(f"tensor {name!r} has an empty dimension")
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        if not np.isfinite(values).all():
            raise EncodingError(f"tensor {name!r} contains non-finite values")
        tensors.append((name, values.reshape(shape)))
        prev_name = name
    return ParameterSet(tensors)
