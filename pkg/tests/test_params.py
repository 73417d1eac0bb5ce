from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedprov.errors import EncodingError, ModelError
from fedprov.params import ParameterSet, canonical_encode, decode, encoded_size

HAND_ENCODED = bytes.fromhex(
    "01000000" "77" "01000000" "02000000" "000000000000f03f" "000000000000f0bf"
)


def test_hand_encoded_example():
    assert canonical_encode(ParameterSet({"w": [1.0, -1.0]})) == HAND_ENCODED


def test_empty_set_encodes_to_nothing():
    assert canonical_encode(ParameterSet()) == b""
    assert decode(b"") == ParameterSet()


def oracle_encode(tensors: dict) -> bytes:
    """Independent encoder written straight from the layout description."""
    out = b""
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
        out += b"".join(struct.pack("<I", d) for d in arr.shape)
        out += b"".join(struct.pack("<d", v) for v in arr.ravel(order="C").tolist())
    return out


names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=6)
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
tensors = st.dictionaries(
    names,
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4), elements=finite),
    max_size=4,
)


@given(tensors)
@settings(max_examples=80, deadline=None)
def test_encoding_matches_oracle_and_round_trips(data):
    params = ParameterSet({k: v.copy() for k, v in data.items()})
    blob = canonical_encode(params)
    assert blob == oracle_encode(data)
    assert len(blob) == encoded_size(params)
    back = decode(blob)
    assert back == params
    assert canonical_encode(back) == blob


def test_names_are_sorted_regardless_of_input_order():
    p = ParameterSet([("b", [1.0]), ("a", [2.0]), ("L0.w", [[3.0]])])
    assert p.names == ["L0.w", "a", "b"]


def test_negative_zero_is_distinct():
    assert ParameterSet({"w": [0.0]}) != ParameterSet({"w": [-0.0]})


def test_arrays_are_frozen():
    arr = np.arange(3.0)
    p = ParameterSet({"w": arr})
    with pytest.raises(ValueError):
        p["w"][0] = 9.0
    copy = p.to_dict()["w"]
    copy[0] = 9.0
    assert p["w"][0] == 0.0


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_values_cannot_be_encoded(bad):
    with pytest.raises(EncodingError):
        canonical_encode(ParameterSet({"w": [1.0, bad]}))


@pytest.mark.parametrize(
    "tensors",
    [[("w", [1.0]), ("w", [2.0])], {"w": np.zeros((0,))}, {"": [1.0]}, {"w": 3.0}],
)
def test_invalid_sets_are_rejected(tensors):
    with pytest.raises(ModelError):
        ParameterSet(tensors)


@pytest.mark.parametrize(
    "blob",
    [
        HAND_ENCODED[:-1],
        HAND_ENCODED + b"\x00",
        HAND_ENCODED[:5],
        # rank 0
        bytes.fromhex("01000000" "77" "00000000"),
        # zero dimension
        bytes.fromhex("01000000" "77" "01000000" "00000000"),
        # names out of order
        oracle_encode({"b": [1.0]}) + oracle_encode({"a": [1.0]}),
        # duplicate name
        oracle_encode({"a": [1.0]}) * 2,
        # invalid utf-8 name
        bytes.fromhex("01000000" "ff" "01000000" "01000000" "000000000000f03f"),
        # NaN value
        bytes.fromhex("01000000" "77" "01000000" "01000000" "000000000000f87f"),
    ],
)
def test_decode_rejects_malformed_blobs(blob):
    with pytest.raises(EncodingError):
        decode(blob)
