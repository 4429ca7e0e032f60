"""Logical optimization and subquery splitting.

Only logical rewrites happen here; which node runs what is decided by
:mod:`edgestream.placement`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import PlacementError
from .model import Endpoint, LogicalPlan, Projection, Schema, Selection, SinkDescriptor, SubQuery


@dataclass(frozen=True)
class OptimizedPlan:
    query_id: str
    source: str
    operators: tuple
    sink: SinkDescriptor
    provenance: tuple[str, ...] = ()
    execution: str = "sandbox"

    def as_logical(self) -> LogicalPlan:
        return LogicalPlan(self.query_id, self.source, self.operators, self.sink, self.execution)

    def to_doc(self) -> dict:
        doc = self.as_logical().to_doc()
        doc["provenance"] = list(self.provenance)
        return doc


# A rule maps (operators, input schema) to rewritten operators, or None if it
# does not apply.
Rule = Callable[[tuple, Schema], "tuple | None"]


def merge_selections(ops: tuple, schema: Schema):
    for i in range(len(ops) - 1):
        a, b = ops[i], ops[i + 1]
        if isinstance(a, Selection) and isinstance(b, Selection):
            return ops[:i] + (Selection(a.predicates + b.predicates),) + ops[i + 2:]
    return None


def push_selections(ops: tuple, schema: Schema):
    for i in range(len(ops) - 1):
        a, b = ops[i], ops[i + 1]
        if isinstance(a, Projection) and isinstance(b, Selection) and set(b.referenced()) <= set(a.keep):
            return ops[:i] + (b, a) + ops[i + 2:]
    return None


def drop_noop_projections(ops: tuple, schema: Schema):
    names = schema.names
    for i, op in enumerate(ops):
        if isinstance(op, Projection):
            if op.keep == names:
                return ops[:i] + ops[i + 1:]
            names = op.keep
    return None


merge_selections.rule_name = "merge-selections"
push_selections.rule_name = "push-selections"
drop_noop_projections.rule_name = "drop-noop-projections"


@dataclass
class RuleStrategy:
    """Apply an ordered rule list repeatedly until nothing changes."""

    rules: Sequence[Rule] = field(
        default_factory=lambda: (merge_selections, push_selections, drop_noop_projections)
    )
    max_rounds: int = 1000

    def rewrite(self, ops: tuple, schema: Schema) -> tuple[tuple, list[str]]:
        applied: list[str] = []
        for _ in range(self.max_rounds):
            changed = False
            for rule in self.rules:
                out = rule(ops, schema)
                if out is not None:
                    ops = out
                    applied.append(getattr(rule, "rule_name", rule.__name__))
                    changed = True
            if not changed:
                break
        return ops, applied


DEFAULT_STRATEGY = RuleStrategy()


def optimize(plan: LogicalPlan, schema: Schema, strategy=None) -> OptimizedPlan:
    strategy = strategy or DEFAULT_STRATEGY
    ops, applied = strategy.rewrite(tuple(plan.operators), schema)
    return OptimizedPlan(plan.query_id, plan.source, ops, plan.sink, tuple(applied), plan.execution)


@dataclass(frozen=True)
class Topology:
    """Which regions exist and where sources and sinks live."""

    regions: dict  # region id -> tuple of cluster ids
    sources: dict  # source (schema) name -> region id
    sinks: dict = field(default_factory=dict)  # sink name -> region id

    @classmethod
    def single(cls, source: str, region: str = "r0", cluster: str = "c0") -> "Topology":
        return cls({region: (cluster,)}, {source: region})


def split(plan: OptimizedPlan, topology: Topology) -> list[SubQuery]:
    """Cut the chain into region-scoped subqueries.

    Operators stay in the source's region.  A single cut before the sink
    stage is made when the sink lives in another region.
    """
    src_region = topology.sources.get(plan.source)
    if src_region is None or src_region not in topology.regions:
        raise PlacementError(f"placement impossible: source {plan.source!r} is not in any region")
    sink_region = topology.sinks.get(plan.sink.name, src_region)
    if sink_region not in topology.regions:
        raise PlacementError(f"placement impossible: sink region {sink_region!r} unknown")
    qid = plan.query_id
    if sink_region == src_region:
        return [SubQuery(f"{qid}.0", qid, plan.operators, Endpoint("source", src_region),
                         Endpoint("sink", src_region), src_region, 0, plan.source, plan.sink.name)]
    return [
        SubQuery(f"{qid}.0", qid, plan.operators, Endpoint("source", src_region),
                 Endpoint("gateway", src_region, sink_region), src_region, 0, plan.source, plan.sink.name),
        SubQuery(f"{qid}.1", qid, (), Endpoint("gateway", sink_region, src_region),
                 Endpoint("sink", sink_region), sink_region, len(plan.operators), plan.source, plan.sink.name),
    ]
