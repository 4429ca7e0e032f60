import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgestream.codec import HEADER_SIZE, decode_tuple, encode_tuple
from edgestream.errors import CodecError, FrameError, SchemaError
from edgestream.model import Attribute, AttrType, Schema, StreamTuple

from oracles import random_schema, random_tuples


def test_zero_tuple_is_header_plus_eight_zero_bytes():
    schema = Schema(1, "one", (Attribute("x", AttrType.INT64),))
    buf = encode_tuple(StreamTuple(1, 0, (0,)), schema)
    # 4-byte id + 8-byte ts is a 12-byte header, then the 8-byte value
    assert len(buf) == 20
    assert buf == struct.pack("<I", 1) + bytes(8) + bytes(8)


def test_elec_tuple_length_matches_field_widths(elec, elec_tuple):
    # 4 + 8 header, Date as 4 + 10, then 7 numeric attributes of 8 bytes
    expected = 4 + 8 + (4 + len("2023-01-01")) + 7 * 8
    assert expected == 82
    assert len(encode_tuple(elec_tuple, elec)) == expected


def test_elec_round_trip(elec, elec_tuple):
    assert decode_tuple(encode_tuple(elec_tuple, elec), elec) == elec_tuple


def test_randomized_round_trip_thousand():
    rng = random.Random(11)
    schema = random_schema(rng, max_attrs=8)
    for t in random_tuples(rng, schema, 1000):
        assert decode_tuple(encode_tuple(t, schema), schema) == t


def test_type_mismatch_names_attribute(elec, elec_tuple):
    bad = StreamTuple(1, 1, ("2023-01-01", "seven") + elec_tuple.values[2:])
    with pytest.raises(CodecError) as err:
        encode_tuple(bad, elec)
    assert err.value.attribute == "Day"


def test_bool_is_not_an_int(elec, elec_tuple):
    bad = StreamTuple(1, 1, ("d", True) + elec_tuple.values[2:])
    with pytest.raises(CodecError):
        encode_tuple(bad, elec)


def test_wrong_arity(elec):
    with pytest.raises(CodecError):
        encode_tuple(StreamTuple(1, 1, ("d",)), elec)


def test_truncated_buffer(elec, elec_tuple):
    buf = encode_tuple(elec_tuple, elec)
    with pytest.raises(FrameError):
        decode_tuple(buf[:5], elec)
    with pytest.raises(FrameError):
        decode_tuple(buf[:-1], elec)


def test_trailing_bytes(elec, elec_tuple):
    with pytest.raises(FrameError):
        decode_tuple(encode_tuple(elec_tuple, elec) + b"\0", elec)


def test_length_field_past_end(elec, elec_tuple):
    buf = bytearray(encode_tuple(elec_tuple, elec))
    struct.pack_into("<I", buf, HEADER_SIZE, 0xFFFFFFF0)
    with pytest.raises(FrameError):
        decode_tuple(bytes(buf), elec)


def test_mutation_fuzz_always_errors_cleanly(elec, elec_tuple):
    rng = random.Random(3)
    base = encode_tuple(elec_tuple, elec)
    for _ in range(3000):
        buf = bytearray(base)
        for _ in range(rng.randint(1, 4)):
            buf[rng.randrange(len(buf))] = rng.randrange(256)
        if rng.random() < 0.3:
            buf = buf[: rng.randrange(len(buf) + 1)]
        try:
            decode_tuple(bytes(buf), elec)
        except CodecError:
            pass


def test_schema_invariants():
    with pytest.raises(SchemaError):
        Schema(1, "empty", ())
    with pytest.raises(SchemaError):
        Schema(1, "dupe", (Attribute("a", AttrType.INT64), Attribute("a", AttrType.TEXT)))


values_by_type = {
    AttrType.INT64: st.integers(-(2**63), 2**63 - 1),
    AttrType.FLOAT64: st.floats(allow_nan=True, allow_infinity=True),
    AttrType.TEXT: st.text(max_size=20),
}


@st.composite
def schema_and_tuple(draw):
    types = draw(st.lists(st.sampled_from(list(AttrType)), min_size=1, max_size=8))
    schema = Schema(draw(st.integers(0, 2**32 - 1)), "h", tuple(Attribute(f"a{i}", t) for i, t in enumerate(types)))
    values = tuple(draw(values_by_type[t]) for t in types)
    return schema, StreamTuple(schema.schema_id, draw(st.integers(0, 2**64 - 1)), values)


@settings(max_examples=300, deadline=None)
@given(schema_and_tuple())
def test_round_trip_property(case):
    schema, t = case
    buf = encode_tuple(t, schema)
    assert decode_tuple(buf, schema) == t
    # determinism: identical tuples encode identically
    assert encode_tuple(StreamTuple(t.schema_id, t.ingress_ts, tuple(t.values)), schema) == buf
