"""Operator configuration blobs handed to ``op_init``.

Both blob kinds start with the input schema's type layout so the guest can
walk variable-length tuples::

    u16 nattr, u8 type_code[nattr]

Selection continues with ``u16 npred`` and ``(u16 attr, u8 cmp, constant)``
rows; projection with ``u32 out_schema_id, u16 nkeep, u16 index[nkeep]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from ..codec import encode_value
from ..errors import ConfigError
from ..model import AttrType, Comparator, Projection, Schema, Selection, value_matches

SELECTION = "selection"
PROJECTION = "projection"
KINDS = (SELECTION, PROJECTION)

_COMPARATORS = list(Comparator)


@dataclass(frozen=True)
class SelectionConfig:
    types: tuple[AttrType, ...]
    # (attribute index, comparator, constant)
    predicates: tuple[tuple[int, Comparator, object], ...]


@dataclass(frozen=True)
class ProjectionConfig:
    types: tuple[AttrType, ...]
    out_schema_id: int
    keep: tuple[int, ...]


def _layout(schema: Schema) -> bytes:
    return struct.pack("<H", len(schema.attributes)) + bytes(t.code for t in schema.types)


def selection_config(schema: Schema, predicates) -> bytes:
    if not predicates:
        raise ConfigError("selection needs at least one predicate")
    out = [_layout(schema), struct.pack("<H", len(predicates))]
    for pred in predicates:
        try:
            idx = schema.index_of(pred.attribute)
        except KeyError:
            raise ConfigError(f"unknown attribute {pred.attribute!r}") from None
        attr = schema.attributes[idx]
        if not value_matches(attr.type, pred.value):
            raise ConfigError(f"constant {pred.value!r} does not match {attr.type.value} attribute {attr.name!r}")
        out.append(struct.pack("<HB", idx, pred.op.code))
        out.append(encode_value(attr.type, pred.value))
    return b"".join(out)


def projection_config(schema: Schema, keep) -> bytes:
    keep = tuple(keep)
    if not keep:
        raise ConfigError("projection must keep at least one attribute")
    try:
        indices = [schema.index_of(name) for name in keep]
    except KeyError as exc:
        raise ConfigError(f"unknown attribute {exc.args[0]!r}") from None
    out_id = schema.project(keep).schema_id
    return _layout(schema) + struct.pack("<IH", out_id, len(indices)) + struct.pack(f"<{len(indices)}H", *indices)


def config_for(op: Selection | Projection, schema: Schema) -> bytes:
    if isinstance(op, Selection):
        return selection_config(schema, op.predicates)
    return projection_config(schema, op.keep)


def _read_layout(blob: bytes) -> tuple[tuple[AttrType, ...], int]:
    if len(blob) < 2:
        raise ConfigError("config blob truncated before attribute count")
    (nattr,) = struct.unpack_from("<H", blob, 0)
    if nattr == 0:
        raise ConfigError("config declares zero attributes")
    if len(blob) < 2 + nattr:
        raise ConfigError("config blob truncated inside type layout")
    try:
        types = tuple(AttrType.from_code(c) for c in blob[2:2 + nattr])
    except KeyError:
        raise ConfigError("unknown attribute type code") from None
    return types, 2 + nattr


def decode_config(kind: str, blob: bytes) -> SelectionConfig | ProjectionConfig:
    """Parse a blob with the same acceptance rules the guest modules apply."""
    blob = bytes(blob)
    types, pos = _read_layout(blob)
    if kind == SELECTION:
        if pos + 2 > len(blob):
            raise ConfigError("config blob truncated before predicate count")
        (npred,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if npred == 0:
            raise ConfigError("selection needs at least one predicate")
        preds = []
        for _ in range(npred):
            if pos + 3 > len(blob):
                raise ConfigError("config blob truncated inside predicate")
            idx, code = struct.unpack_from("<HB", blob, pos)
            pos += 3
            if idx >= len(types):
                raise ConfigError(f"predicate attribute index {idx} out of range")
            if code >= len(_COMPARATORS):
                raise ConfigError(f"unknown comparator code {code}")
            t = types[idx]
            if t is AttrType.TEXT:
                if pos + 4 > len(blob):
                    raise ConfigError("config blob truncated inside text constant")
                (n,) = struct.unpack_from("<I", blob, pos)
                if pos + 4 + n > len(blob):
                    raise ConfigError("config blob truncated inside text constant")
                const = blob[pos + 4:pos + 4 + n]
                pos += 4 + n
            else:
                if pos + 8 > len(blob):
                    raise ConfigError("config blob truncated inside constant")
                const = struct.unpack_from("<q" if t is AttrType.INT64 else "<d", blob, pos)[0]
                pos += 8
            preds.append((idx, _COMPARATORS[code], const))
        if pos != len(blob):
            raise ConfigError("trailing bytes after selection config")
        return SelectionConfig(types, tuple(preds))
    if kind == PROJECTION:
        if pos + 6 > len(blob):
            raise ConfigError("config blob truncated before keep list")
        out_id, nkeep = struct.unpack_from("<IH", blob, pos)
        pos += 6
        if nkeep == 0:
            raise ConfigError("projection must keep at least one attribute")
        if pos + 2 * nkeep != len(blob):
            raise ConfigError("keep list length does not match blob size")
        keep = struct.unpack_from(f"<{nkeep}H", blob, pos)
        if any(i >= len(types) for i in keep):
            raise ConfigError("projection index out of range")
        return ProjectionConfig(types, out_id, tuple(keep))
    raise ConfigError(f"unknown operator kind {kind!r}")


def output_schema(kind: str, blob: bytes, schema_in: Schema) -> Schema:
    cfg = decode_config(kind, blob)
    if cfg.types != schema_in.types:
        raise ConfigError("config layout does not match the input schema")
    if isinstance(cfg, SelectionConfig):
        return schema_in
    names = tuple(schema_in.attributes[i].name for i in cfg.keep)
    out = schema_in.project(names)
    if out.schema_id != cfg.out_schema_id:
        out = Schema(cfg.out_schema_id, out.name, out.attributes)
    return out


def kind_of(op) -> str:
    return SELECTION if isinstance(op, Selection) else PROJECTION

