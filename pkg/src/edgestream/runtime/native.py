"""In-process reference operators.

Same byte-level contract as the sandboxed modules, written directly in
Python.  Used as the differential oracle for the sandbox and as the
``native`` execution mode of the benchmark.
"""
from __future__ import annotations

import operator
import struct
import time

from ..codec import HEADER_SIZE, attribute_spans
from ..errors import AbiError, FrameError, OperatorFault
from ..model import AttrType, Comparator, Schema
from .config import PROJECTION, SELECTION, ProjectionConfig, SelectionConfig, decode_config, output_schema
from .sandbox import OptSample

_OPS = {
    Comparator.LT: operator.lt,
    Comparator.LE: operator.le,
    Comparator.EQ: operator.eq,
    Comparator.NE: operator.ne,
    Comparator.GE: operator.ge,
    Comparator.GT: operator.gt,
}
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_HDR_ID = struct.Struct("<I")


def _run_selection(cfg: SelectionConfig, buf: bytes) -> bytes | None:
    spans = attribute_spans(buf, cfg.types)
    for idx, op, const in cfg.predicates:
        start, end = spans[idx]
        t = cfg.types[idx]
        if t is AttrType.INT64:
            value = _I64.unpack_from(buf, start)[0]
        elif t is AttrType.FLOAT64:
            value = _F64.unpack_from(buf, start)[0]
        else:
            # bytewise comparison of UTF-8 matches code point order
            value = buf[start + 4:end]
        if not _OPS[op](value, const):
            return None
    return buf


def _run_projection(cfg: ProjectionConfig, buf: bytes) -> bytes:
    spans = attribute_spans(buf, cfg.types)
    parts = [_HDR_ID.pack(cfg.out_schema_id), buf[4:HEADER_SIZE]]
    for idx in cfg.keep:
        start, end = spans[idx]
        parts.append(buf[start:end])
    return b"".join(parts)


def native_reference(kind: str, config, encoded_tuple: bytes) -> bytes | None:
    """Apply one operator to one encoded tuple without the sandbox.

    ``config`` is either a config blob or an already decoded config.
    """
    cfg = decode_config(kind, config) if isinstance(config, (bytes, bytearray)) else config
    buf = bytes(encoded_tuple)
    if len(buf) < HEADER_SIZE:
        raise AbiError("tuple shorter than header")
    if isinstance(cfg, SelectionConfig):
        return _run_selection(cfg, buf)
    return _run_projection(cfg, buf)


class NativeOperator:
    """Drop-in replacement for :class:`OperatorHandle` without the sandbox."""

    def __init__(self, kind: str, config_blob: bytes, schema_in: Schema, operator_id: str = "native"):
        if kind not in (SELECTION, PROJECTION):
            raise ValueError(f"unknown operator kind {kind!r}")
        self.kind = kind
        self.operator_id = operator_id
        self.schema_in = schema_in
        self.schema_out = output_schema(kind, config_blob, schema_in)
        self._cfg = decode_config(kind, config_blob)
        self._run = _run_selection if kind == SELECTION else _run_projection

    def invoke(self, encoded_tuple: bytes) -> tuple[bytes | None, OptSample]:
        buf = bytes(encoded_tuple)
        t_before = time.monotonic_ns()
        try:
            out = self._run(self._cfg, buf)
        except FrameError as exc:
            raise OperatorFault(f"{self.operator_id}: malformed tuple", reason=str(exc)) from exc
        t_after = time.monotonic_ns()
        return out, OptSample(self.operator_id, t_before, t_after)

    def close(self) -> None:
        pass
