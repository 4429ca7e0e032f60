"""Domain types shared by every layer: schemas, tuples, plans, nodes, metrics.

All types are immutable value objects.  Each has a ``to_doc``/``from_doc``
pair producing the JSON-shaped documents exchanged with the coordinator.
"""
from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, replace
from typing import Any, Union

from .errors import SchemaError

Value = Union[int, float, str]

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1
UINT32_MAX = 2**32 - 1


class AttrType(str, enum.Enum):
    INT64 = "int64"
    FLOAT64 = "float64"
    TEXT = "text"

    @property
    def code(self) -> int:
        return _TYPE_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "AttrType":
        return _TYPES_BY_CODE[code]


_TYPE_CODES = {AttrType.INT64: 0, AttrType.FLOAT64: 1, AttrType.TEXT: 2}
_TYPES_BY_CODE = {v: k for k, v in _TYPE_CODES.items()}


def value_matches(attr_type: AttrType, value: Any) -> bool:
    if isinstance(value, bool):
        return False
    if attr_type is AttrType.INT64:
        return isinstance(value, int) and INT64_MIN <= value <= INT64_MAX
    if attr_type is AttrType.FLOAT64:
        return isinstance(value, (int, float))
    return isinstance(value, str)


@dataclass(frozen=True)
class Attribute:
    name: str
    type: AttrType

    def to_doc(self) -> dict:
        return {"name": self.name, "type": self.type.value}


@dataclass(frozen=True)
class Schema:
    schema_id: int
    name: str
    attributes: tuple[Attribute, ...]

    def __post_init__(self):
        if not self.attributes:
            raise SchemaError(f"schema {self.name!r} has no attributes")
        names = [a.name for a in self.attributes]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"schema {self.name!r} repeats attribute(s) {', '.join(dupes)}")
        if not 0 <= self.schema_id <= UINT32_MAX:
            raise SchemaError(f"schema_id {self.schema_id} does not fit in 4 bytes")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    @property
    def types(self) -> tuple[AttrType, ...]:
        return tuple(a.type for a in self.attributes)

    def index_of(self, name: str) -> int:
        for i, a in enumerate(self.attributes):
            if a.name == name:
                return i
        raise KeyError(name)

    def attribute(self, name: str) -> Attribute:
        return self.attributes[self.index_of(name)]

    def project(self, keep: tuple[str, ...] | list[str]) -> "Schema":
        """Schema of the tuples a projection onto ``keep`` produces."""
        keep = tuple(keep)
        if keep == self.names:
            return self
        attrs = tuple(self.attribute(n) for n in keep)
        return Schema(derived_schema_id(self.schema_id, keep), f"{self.name}[{','.join(keep)}]", attrs)

    def same_layout(self, other: "Schema") -> bool:
        return self.name == other.name and self.attributes == other.attributes

    def to_doc(self) -> dict:
        return {
            "schema_id": self.schema_id,
            "name": self.name,
            "attributes": [a.to_doc() for a in self.attributes],
        }

    @classmethod
    def from_doc(cls, doc: dict, schema_id: int | None = None) -> "Schema":
        try:
            attrs = tuple(Attribute(str(a["name"]), AttrType(a["type"])) for a in doc["attributes"])
            sid = schema_id if schema_id is not None else int(doc.get("schema_id", 0))
            return cls(sid, str(doc["name"]), attrs)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from exc


def derived_schema_id(parent_id: int, keep: tuple[str, ...]) -> int:
    """Stable id for a projected schema. High bit set; registered ids never use it."""
    digest = zlib.crc32(f"{parent_id}:{','.join(keep)}".encode())
    return 0x80000000 | (digest & 0x7FFFFFFF)


@dataclass(frozen=True)
class StreamTuple:
    schema_id: int
    ingress_ts: int
    values: tuple

    def __eq__(self, other):
        if not isinstance(other, StreamTuple):
            return NotImplemented
        if self.schema_id != other.schema_id or self.ingress_ts != other.ingress_ts:
            return False
        if len(self.values) != len(other.values):
            return False
        # NaN payloads round-trip bit-exactly, so treat NaN == NaN here
        for a, b in zip(self.values, other.values):
            if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
                continue
            if a != b or type(a) is not type(b):
                return False
        return True

    __hash__ = None  # type: ignore[assignment]


ELEC_SCHEMA = Schema(
    1,
    "elec",
    (
        Attribute("Date", AttrType.TEXT),
        Attribute("Day", AttrType.INT64),
        Attribute("Period", AttrType.INT64),
        Attribute("NSWprice", AttrType.FLOAT64),
        Attribute("NSWdemand", AttrType.FLOAT64),
        Attribute("VICprice", AttrType.FLOAT64),
        Attribute("VICdemand", AttrType.FLOAT64),
        Attribute("transfer", AttrType.FLOAT64),
    ),
)


class Comparator(str, enum.Enum):
    LT = "<"
    LE = "<="
    EQ = "="
    NE = "!="
    GE = ">="
    GT = ">"

    @property
    def code(self) -> int:
        return _CMP_CODES[self]

    @classmethod
    def parse(cls, text: str) -> "Comparator":
        text = _CMP_ALIASES.get(text, text)
        return cls(text)


_CMP_CODES = {c: i for i, c in enumerate(Comparator)}
_CMP_ALIASES = {"≤": "<=", "≥": ">=", "≠": "!=", "==": "=", "<>": "!="}


@dataclass(frozen=True)
class Predicate:
    attribute: str
    op: Comparator
    value: Value

    def __str__(self):
        return f"{self.attribute} {self.op.value} {self.value!r}"

    def to_doc(self) -> list:
        return [self.attribute, self.op.value, self.value]


@dataclass(frozen=True)
class Selection:
    predicates: tuple[Predicate, ...]
    kind = "selection"

    def referenced(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(p.attribute for p in self.predicates))

    def to_doc(self) -> dict:
        return {"kind": self.kind, "predicates": [p.to_doc() for p in self.predicates]}

    def __str__(self):
        return "Sel(" + " & ".join(str(p) for p in self.predicates) + ")"


@dataclass(frozen=True)
class Projection:
    keep: tuple[str, ...]
    kind = "projection"

    def referenced(self) -> tuple[str, ...]:
        return self.keep

    def to_doc(self) -> dict:
        return {"kind": self.kind, "keep": list(self.keep)}

    def __str__(self):
        return "Proj(" + ",".join(self.keep) + ")"


LogicalOperator = Union[Selection, Projection]


def operator_from_doc(doc: dict) -> LogicalOperator:
    kind = str(doc.get("kind", "")).lower()
    if kind == "selection":
        preds = []
        for p in doc.get("predicates", []):
            if isinstance(p, dict):
                attr, op, val = p["attribute"], p["op"], p["value"]
            else:
                attr, op, val = p
            preds.append(Predicate(str(attr), Comparator.parse(op), val))
        return Selection(tuple(preds))
    if kind == "projection":
        return Projection(tuple(str(k) for k in doc.get("keep", [])))
    raise ValueError(f"unknown operator kind {doc.get('kind')!r}")


@dataclass(frozen=True)
class SinkDescriptor:
    name: str

    def to_doc(self) -> dict:
        return {"name": self.name}


@dataclass(frozen=True)
class LogicalPlan:
    query_id: str
    source: str
    operators: tuple[LogicalOperator, ...]
    sink: SinkDescriptor
    execution: str = "sandbox"

    def to_doc(self) -> dict:
        return {
            "query_id": self.query_id,
            "source": self.source,
            "operators": [op.to_doc() for op in self.operators],
            "sink": self.sink.to_doc(),
            "execution": self.execution,
        }

    @classmethod
    def from_doc(cls, doc: dict, query_id: str | None = None) -> "LogicalPlan":
        execution = str(doc.get("execution", "sandbox"))
        if execution not in ("sandbox", "native"):
            raise ValueError(f"execution must be 'sandbox' or 'native', got {execution!r}")
        sink = doc.get("sink") or {}
        return cls(
            query_id=query_id or str(doc.get("query_id", "")),
            source=str(doc["source"]),
            operators=tuple(operator_from_doc(o) for o in doc.get("operators", [])),
            sink=SinkDescriptor(str(sink.get("name", "sink"))),
            execution=execution,
        )


@dataclass(frozen=True)
class Endpoint:
    """One end of a subquery: the source, the sink, or a gateway bridging regions."""

    kind: str  # "source" | "sink" | "gateway"
    region: str
    peer_region: str | None = None

    def to_doc(self) -> dict:
        doc = {"kind": self.kind, "region": self.region}
        if self.peer_region is not None:
            doc["peer_region"] = self.peer_region
        return doc


@dataclass(frozen=True)
class SubQuery:
    subquery_id: str
    query_id: str
    operators: tuple[LogicalOperator, ...]
    upstream: Endpoint
    downstream: Endpoint
    region: str
    offset: int = 0  # position of operators[0] in the full chain
    source: str = ""
    sink: str = ""

    def to_doc(self) -> dict:
        return {
            "subquery_id": self.subquery_id,
            "query_id": self.query_id,
            "operators": [o.to_doc() for o in self.operators],
            "upstream": self.upstream.to_doc(),
            "downstream": self.downstream.to_doc(),
            "region": self.region,
            "offset": self.offset,
            "source": self.source,
            "sink": self.sink,
        }


class NodeRole(str, enum.Enum):
    SLEEPER = "s"
    PRODUCER = "p"
    CONSUMER = "c"
    REPLICA = "r"
    GATEWAY = "g"
    SINK = "z"
    MANAGER = "h"


@dataclass(frozen=True)
class NodeDescriptor:
    node_id: str
    host: str = "127.0.0.1"
    data_port: int = 0
    role: NodeRole = NodeRole.SLEEPER
    reliability: float = 0.5
    last_heartbeat: float = 0.0
    capacity: int = 1
    kind: str = "worker"  # "worker" | "source" | "sink"
    source_schema: str | None = None
    sink_name: str | None = None
    cluster_id: str = "c0"

    def __post_init__(self):
        if not 0.0 <= self.reliability <= 1.0:
            raise ValueError(f"reliability {self.reliability} outside [0, 1]")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    @property
    def address(self) -> str:
        return f"{self.host}:{self.data_port}"

    def with_(self, **changes) -> "NodeDescriptor":
        return replace(self, **changes)

    def to_doc(self) -> dict:
        return {
            "node_id": self.node_id,
            "host": self.host,
            "data_port": self.data_port,
            "role": self.role.value,
            "reliability": self.reliability,
            "last_heartbeat": self.last_heartbeat,
            "capacity": self.capacity,
            "kind": self.kind,
            "source_schema": self.source_schema,
            "sink_name": self.sink_name,
            "cluster_id": self.cluster_id,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "NodeDescriptor":
        return cls(
            node_id=str(doc.get("node_id") or ""),
            host=str(doc.get("host", "127.0.0.1")),
            data_port=int(doc.get("data_port", 0)),
            role=NodeRole(doc.get("role", "s")),
            reliability=float(doc.get("reliability", 0.5)),
            last_heartbeat=float(doc.get("last_heartbeat", 0.0)),
            capacity=int(doc.get("capacity", 1)),
            kind=str(doc.get("kind", "worker")),
            source_schema=doc.get("source_schema"),
            sink_name=doc.get("sink_name"),
            cluster_id=str(doc.get("cluster_id", "c0")),
        )


@dataclass(frozen=True)
class MetricsSample:
    node_id: str
    window_start: int
    window_end: int
    tuples_in: int
    tuples_out: int
    opt_sum: int
    queue_depth: int
    busy_fraction: float
    stage: str | None = None
    # monotonic ns of the first/last tuple seen in the window, for exact rates
    first_ts: int | None = None
    last_ts: int | None = None

    def __post_init__(self):
        if self.window_end <= self.window_start:
            raise ValueError("window_end must be after window_start")

    @classmethod
    def from_window(cls, node_id: str, window_start: int, window_end: int, tuples_in: int,
                    tuples_out: int, opt_sum: int, queue_depth: int = 0, **extra) -> "MetricsSample":
        busy = busy_fraction(opt_sum, window_start, window_end)
        return cls(node_id, window_start, window_end, tuples_in, tuples_out, opt_sum,
                   queue_depth, busy, **extra)

    def to_doc(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_doc(cls, doc: dict) -> "MetricsSample":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


def busy_fraction(opt_sum: int, window_start: int, window_end: int) -> float:
    span = window_end - window_start
    if span <= 0:
        return 0.0
    return min(1.0, max(0.0, opt_sum / span))



class CommandKind(str, enum.Enum):
    DEPLOY_OPERATOR = "DeployOperator"
    START_QUERY = "StartQuery"
    STOP_QUERY = "StopQuery"
    PROMOTE_REPLICA = "PromoteReplica"
    ASSIGN_REPLICA = "AssignReplica"
    REASSIGN_ROLE = "ReassignRole"
    REASSIGN_ENDPOINT = "ReassignEndpoint"


@dataclass(frozen=True)
class Command:
    """Control-plane message for one node. ``command_id`` is 0 until enqueued."""

    target: str
    kind: CommandKind
    payload: dict
    command_id: int = 0

    def to_doc(self) -> dict:
        return {"command_id": self.command_id, "target": self.target,
                "kind": self.kind.value, "payload": self.payload}

    @classmethod
    def from_doc(cls, doc: dict) -> "Command":
        return cls(doc["target"], CommandKind(doc["kind"]), doc.get("payload") or {},
                   int(doc.get("command_id", 0)))
