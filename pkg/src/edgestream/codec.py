"""Flat binary tuple encoding.

Layout (little-endian)::

    u32 schema_id | u64 ingress_ts | attr_0 | attr_1 | ...

``int64`` and ``float64`` attributes take 8 bytes; ``text`` is a u32 byte
length followed by UTF-8.  The same layout is parsed inside the sandboxed
operator modules, so it must stay bit-exact.
"""
from __future__ import annotations

import struct

from .errors import CodecError, FrameError
from .model import AttrType, Schema, StreamTuple, value_matches

HEADER = struct.Struct("<IQ")
HEADER_SIZE = HEADER.size  # 12
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_U32 = struct.Struct("<I")

UINT64_MAX = 2**64 - 1


def encode_tuple(t: StreamTuple, schema: Schema) -> bytes:
    if t.schema_id != schema.schema_id:
        raise CodecError(f"tuple schema_id {t.schema_id} != schema {schema.schema_id}")
    if not 0 <= t.ingress_ts <= UINT64_MAX:
        raise CodecError(f"ingress_ts {t.ingress_ts} out of range")
    if len(t.values) != len(schema.attributes):
        raise CodecError(
            f"tuple has {len(t.values)} values, schema {schema.name!r} has {len(schema.attributes)}"
        )
    parts = [HEADER.pack(t.schema_id, t.ingress_ts)]
    for attr, value in zip(schema.attributes, t.values):
        if not value_matches(attr.type, value):
            raise CodecError(
                f"attribute {attr.name!r} expects {attr.type.value}, got {type(value).__name__}",
                attribute=attr.name,
            )
        parts.append(encode_value(attr.type, value))
    return b"".join(parts)


def encode_value(attr_type: AttrType, value) -> bytes:
    if attr_type is AttrType.INT64:
        return _I64.pack(value)
    if attr_type is AttrType.FLOAT64:
        return _F64.pack(float(value))
    raw = value.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def decode_tuple(buf: bytes, schema: Schema) -> StreamTuple:
    buf = bytes(buf)
    if len(buf) < HEADER_SIZE:
        raise FrameError(f"buffer of {len(buf)} bytes is shorter than the tuple header")
    schema_id, ingress_ts = HEADER.unpack_from(buf, 0)
    if schema_id != schema.schema_id:
        raise CodecError(f"buffer carries schema_id {schema_id}, expected {schema.schema_id}")
    pos = HEADER_SIZE
    values = []
    n = len(buf)
    for attr in schema.attributes:
        if attr.type is AttrType.TEXT:
            if pos + 4 > n:
                raise FrameError(f"truncated length of {attr.name!r}")
            (length,) = _U32.unpack_from(buf, pos)
            pos += 4
            if pos + length > n:
                raise FrameError(f"text {attr.name!r} claims {length} bytes, {n - pos} remain")
            try:
                values.append(buf[pos:pos + length].decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise CodecError(f"text {attr.name!r} is not UTF-8", attribute=attr.name) from exc
            pos += length
        else:
            if pos + 8 > n:
                raise FrameError(f"truncated value of {attr.name!r}")
            codec = _I64 if attr.type is AttrType.INT64 else _F64
            values.append(codec.unpack_from(buf, pos)[0])
            pos += 8
    if pos != n:
        raise FrameError(f"{n - pos} trailing bytes after last attribute")
    return StreamTuple(schema_id, ingress_ts, tuple(values))


def attribute_spans(buf: bytes, types: tuple[AttrType, ...]) -> list[tuple[int, int]]:
    """(start, end) byte span of every encoded attribute, text length prefix included."""
    spans = []
    pos = HEADER_SIZE
    n = len(buf)
    for t in types:
        if t is AttrType.TEXT:
            if pos + 4 > n:
                raise FrameError("truncated text length")
            end = pos + 4 + _U32.unpack_from(buf, pos)[0]
        else:
            end = pos + 8
        if end > n:
            raise FrameError("attribute runs past end of buffer")
        spans.append((pos, end))
        pos = end
    if pos != n:
        raise FrameError(f"{n - pos} trailing bytes after last attribute")
    return spans


def encoded_size(t: StreamTuple, schema: Schema) -> int:
    size = HEADER_SIZE
    for attr, value in zip(schema.attributes, t.values):
        size += 4 + len(value.encode("utf-8")) if attr.type is AttrType.TEXT else 8
    return size
