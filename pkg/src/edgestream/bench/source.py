"""CSV loading and pacing configuration for the bench producer."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

from ..codec import encode_tuple
from ..errors import SchemaError
from ..model import ELEC_SCHEMA, AttrType, Schema, StreamTuple, value_matches
from ..pacing import tuple_budget

log = logging.getLogger(__name__)
PRESET_RATES = (125, 500, 1000)


@dataclass
class SourceConfig:
    csv_path: str
    schema: Schema = ELEC_SCHEMA
    rate: float = 125.0
    duration: float | None = None
    count: int | None = None
    loop: bool = False

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")

    @property
    def budget(self) -> int | None:
        return tuple_budget(self.rate, self.duration, self.count)


_PARSE = {
    AttrType.INT64: int,
    AttrType.FLOAT64: float,
    AttrType.TEXT: str,
}


def parse_row(row, schema: Schema):
    if len(row) != len(schema.attributes):
        raise ValueError(f"expected {len(schema.attributes)} columns, got {len(row)}")
    values = tuple(_PARSE[a.type](cell) for a, cell in zip(schema.attributes, row))
    for a, v in zip(schema.attributes, values):
        if not value_matches(a.type, v):
            raise ValueError(f"{a.name}: {v!r} is not {a.type.value}")
    return values


def load_csv(path, schema: Schema = ELEC_SCHEMA) -> tuple[list[bytes], int]:
    """Encode every well-formed row; returns (payloads, skipped rows).

    Ingress timestamps are left at 0 and stamped at emission.
    """
    payloads, skipped = [], 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return payloads, 0
        if len(header) != len(schema.attributes):
            raise SchemaError(f"csv has {len(header)} columns, schema {schema.name!r} has {len(schema.attributes)}")
        for row in reader:
            try:
                values = parse_row(row, schema)
            except (ValueError, KeyError):
                skipped += 1
                continue
            payloads.append(encode_tuple(StreamTuple(schema.schema_id, 0, values), schema))
    if skipped:
        log.warning("%s: skipped %d malformed rows", path, skipped)
    return payloads, skipped
