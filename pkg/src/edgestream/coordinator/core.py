"""Coordinator logic without any networking.

Schema registry, query manager, node registry, failure detector, metadata
summaries and the per-node command logs.  Every public method takes the
state lock, so HTTP handler threads can call straight in.  Time comes from
an injectable clock so tests can drive the failure detector.
"""
from __future__ import annotations

import base64
import enum
import hashlib
import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from ..errors import (
    ConflictError, EscalationSignal, NotFoundError, PlacementError, PlanError, SchemaError,
)
from ..model import (
    Command, CommandKind, LogicalPlan, MetricsSample, NodeDescriptor, NodeRole, Schema,
)
from ..placement import (
    ClusterRoles, DeploymentPlan, RegionTier, ReliabilityScore, update_reliability,
)
from ..plan import OptimizedPlan, Topology, optimize, split
from ..runtime import config_for, module_bytes
from ..runtime.config import kind_of
from ..transport import stream_id_for
from ..validation import validate_plan
from .commands import CommandLog
from .config import CoordinatorConfig

log = logging.getLogger(__name__)

CLUSTER = "c0"
REGION = "r0"


class QueryState(str, enum.Enum):
    REGISTERED = "Registered"
    OPTIMIZED = "Optimized"
    DEPLOYING = "Deploying"
    RUNNING = "Running"
    DEGRADED = "Degraded"
    STOPPED = "Stopped"
    FAILED = "Failed"


S = QueryState
TERMINAL = {S.STOPPED, S.FAILED}
ALLOWED = {
    S.REGISTERED: {S.OPTIMIZED, S.FAILED, S.STOPPED},
    S.OPTIMIZED: {S.DEPLOYING, S.FAILED, S.STOPPED},
    S.DEPLOYING: {S.RUNNING, S.FAILED, S.STOPPED},
    S.RUNNING: {S.DEGRADED, S.STOPPED, S.FAILED},
    S.DEGRADED: {S.RUNNING, S.STOPPED, S.FAILED},
    S.STOPPED: set(),
    S.FAILED: set(),
}


def history_is_valid(history) -> bool:
    """True if every consecutive pair of states is an allowed edge."""
    states = [QueryState(h[0] if isinstance(h, (tuple, list)) else h) for h in history]
    if not states or states[0] is not S.REGISTERED:
        return False
    return all(b in ALLOWED[a] for a, b in zip(states, states[1:]))


@dataclass
class QueryRecord:
    query_id: str
    plan: LogicalPlan
    schema: Schema
    schemas: tuple
    replication: bool = False
    optimized: OptimizedPlan | None = None
    subqueries: list = field(default_factory=list)
    deployments: dict = field(default_factory=dict)  # subquery id -> DeploymentPlan
    state: QueryState = S.REGISTERED
    history: list = field(default_factory=list)  # (state, timestamp, note)
    reason: str = ""
    awaiting: dict = field(default_factory=dict)  # node id -> command id to be acked
    faults: list = field(default_factory=list)

    def to_doc(self) -> dict:
        stages = []
        for dp in self.deployments.values():
            stages += [{"stage": a.stage, "node_id": a.node_id, "role": a.role.value}
                       for a in dp.assignments]
        return {
            "query_id": self.query_id,
            "state": self.state.value,
            "reason": self.reason,
            "plan": self.plan.to_doc(),
            "optimized": self.optimized.to_doc() if self.optimized else None,
            "subqueries": [sq.to_doc() for sq in self.subqueries],
            "deployments": [dp.to_doc() for dp in self.deployments.values()],
            "stages": stages,
            "replication": self.replication,
            "history": [{"state": s.value, "at": t, "note": n} for s, t, n in self.history],
            "faults": list(self.faults),
        }


@dataclass
class NodeRecord:
    descriptor: NodeDescriptor
    registered_at: float
    last_heartbeat: float
    missed: int = 0
    status: str = "alive"  # alive | dead | left
    acked_through: int = 0
    samples: deque = field(default_factory=lambda: deque(maxlen=1000))
    latest: dict = field(default_factory=dict)  # stage -> MetricsSample
    totals: dict = field(default_factory=dict)  # stage -> [tuples_in, tuples_out]


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


class Coordinator:
    def __init__(self, config: CoordinatorConfig | None = None, clock=time.monotonic):
        self.config = config or CoordinatorConfig()
        self.clock = clock
        self.lock = threading.RLock()
        self.schemas: dict[int, Schema] = {}
        self.queries: dict[str, QueryRecord] = {}
        self.nodes: dict[str, NodeRecord] = {}
        self.reliability: dict[str, ReliabilityScore] = {}
        self.logs: dict[str, CommandLog] = {}
        self.modules: dict[str, bytes] = {}
        self.cluster = ClusterRoles(CLUSTER)
        self.region = RegionTier(REGION, {CLUSTER: self.cluster})
        self.metadata_updated_at: float | None = None
        self._query_ids = itertools.count(1)
        self._node_ids = itertools.count(1)

    # -- schemas ----------------------------------------------------------------
    def register_schema(self, doc: dict) -> int:
        with self.lock:
            requested = int(doc.get("schema_id") or 0)
            schema = Schema.from_doc(doc, requested or self._next_schema_id())
            if schema.schema_id >= 0x80000000:
                raise SchemaError("schema ids with the high bit set are reserved for derived schemas")
            for existing in self.schemas.values():
                if existing.name == schema.name:
                    if existing.same_layout(schema) and (not requested or requested == existing.schema_id):
                        return existing.schema_id
                    raise ConflictError(f"schema {schema.name!r} already registered with a different layout")
            if schema.schema_id in self.schemas:
                raise ConflictError(f"schema id {schema.schema_id} already taken")
            self.schemas[schema.schema_id] = schema
            return schema.schema_id

    def _next_schema_id(self) -> int:
        return max(self.schemas, default=0) + 1

    def get_schema(self, key) -> Schema:
        with self.lock:
            for s in self.schemas.values():
                if str(s.schema_id) == str(key) or s.name == key:
                    return s
            raise NotFoundError(f"no schema {key!r}")

    # -- nodes ------------------------------------------------------------------
    def register_node(self, doc: dict) -> dict:
        with self.lock:
            now = self.clock()
            node_id = str(doc.get("node_id") or "")
            if not node_id:
                node_id = f"node-{next(self._node_ids)}"
                while node_id in self.nodes:
                    node_id = f"node-{next(self._node_ids)}"
            kind = str(doc.get("kind", "worker"))
            if kind not in ("worker", "source", "sink"):
                raise ValueError(f"node kind must be worker, source or sink, got {kind!r}")
            score = self.reliability.setdefault(node_id, ReliabilityScore(node_id))
            old = self.nodes.get(node_id)
            if kind == "source":
                role = NodeRole.PRODUCER
            elif kind == "sink":
                role = NodeRole.SINK
            elif old is not None and old.descriptor.role is NodeRole.MANAGER:
                role = NodeRole.MANAGER
            elif not any(r.descriptor.kind == "worker" and r.descriptor.role is NodeRole.MANAGER
                         and r.status == "alive" for r in self.nodes.values() if r.descriptor.node_id != node_id):
                role = NodeRole.MANAGER  # an isolated node takes over the manager role
            else:
                role = NodeRole.SLEEPER
            desc = NodeDescriptor(
                node_id=node_id, host=str(doc.get("host", "127.0.0.1")),
                data_port=int(doc.get("data_port", 0)), role=role, reliability=score.score,
                last_heartbeat=now, capacity=int(doc.get("capacity", 1)), kind=kind,
                source_schema=doc.get("source_schema"), sink_name=doc.get("sink_name"),
                cluster_id=CLUSTER)
            rec = NodeRecord(desc, now, now)
            if old is not None:
                rec.samples = old.samples
                rec.totals = old.totals
            self.nodes[node_id] = rec
            if node_id not in self.logs:
                self.logs[node_id] = CommandLog(node_id, self.config.replay_buffer)
            last_id = self.logs[node_id].last_id
            restarted_in_place = old is not None and old.status == "alive" and node_id in self.cluster.states
            if restarted_in_place:
                # keep its assignments and hand it a fresh copy of its work
                desc = desc.with_(role=self.cluster.states[node_id].role)
                rec.descriptor = desc
                self.cluster.nodes[node_id] = desc
                self.resync(node_id)
            else:
                if node_id in self.cluster.states:
                    st = self.cluster.states[node_id]
                    st.assigned_operators, st.guarded_node = [], None
                self.cluster.upsert(desc)
                self.cluster.states[node_id].role = role
            self._retry_pending()
            return {"node_id": node_id, "cluster_id": CLUSTER, "role": desc.role.value,
                    "heartbeat_interval": self.config.heartbeat_interval,
                    "cluster_active": self.cluster_active(),
                    "last_command_id": last_id}

    def deregister_node(self, node_id: str) -> None:
        with self.lock:
            rec = self._node(node_id)
            rec.status = "left"
            self.cluster.dead.add(node_id)

    def cluster_active(self) -> bool:
        workers = [r for r in self.nodes.values() if r.descriptor.kind == "worker" and r.status == "alive"]
        return len(workers) >= self.config.activation_threshold

    def _node(self, node_id: str) -> NodeRecord:
        rec = self.nodes.get(node_id)
        if rec is None:
            raise NotFoundError(f"unknown node {node_id!r}; register first")
        return rec

    def list_nodes(self) -> list[dict]:
        with self.lock:
            out = []
            for node_id in sorted(self.nodes):
                rec = self.nodes[node_id]
                st = self.cluster.states.get(node_id)
                doc = rec.descriptor.to_doc()
                doc.update({
                    "role": st.role.value if st else rec.descriptor.role.value,
                    "reliability": self.reliability[node_id].score,
                    "last_heartbeat": rec.last_heartbeat,
                    "status": rec.status,
                    "guarded_node": st.guarded_node if st else None,
                    "assigned_operators": list(st.assigned_operators) if st else [],
                    "acked_through": rec.acked_through,
                    "last_command_id": self.logs[node_id].last_id,
                })
                out.append(doc)
            return out

    # -- heartbeats and failure detection -----------------------------------------
    def heartbeat(self, node_id: str, doc: dict | None = None) -> dict:
        doc = doc or {}
        with self.lock:
            rec = self._node(node_id)
            if rec.status != "alive":
                raise NotFoundError(f"node {node_id!r} was declared {rec.status}; register again")
            now = self.clock()
            rec.last_heartbeat = now
            rec.missed = 0
            score = update_reliability(self.reliability[node_id], True, self.config.alpha)
            self.reliability[node_id] = score
            self.cluster.set_reliability(node_id, score.score)
            rec.acked_through = max(rec.acked_through, int(doc.get("acked_through", 0)))
            for s in doc.get("samples", []):
                sample = MetricsSample.from_doc(s)
                rec.samples.append(sample)
                rec.latest[sample.stage or "-"] = sample
                acc = rec.totals.setdefault(sample.stage or "-", [0, 0])
                acc[0] += sample.tuples_in
                acc[1] += sample.tuples_out
            for fault in doc.get("faults", []):
                self._on_fault(node_id, fault)
            for failed in doc.get("failed_commands", []):
                self._on_command_failure(node_id, failed)
            self._advance_states()
            self.metadata_updated_at = now
            return {"ok": True, "pending": self.logs[node_id].pending(rec.acked_through),
                    "last_command_id": self.logs[node_id].last_id}

    def tick(self) -> list[str]:
        """Run the failure detector once.  Returns nodes declared dead now."""
        died = []
        with self.lock:
            now = self.clock()
            interval = self.config.heartbeat_interval
            for node_id in sorted(self.nodes):
                rec = self.nodes[node_id]
                if rec.status != "alive":
                    continue
                # half an interval of grace absorbs scheduling jitter
                due = int(max(0.0, now - rec.last_heartbeat - 0.5 * interval) // interval)
                while rec.missed < due:
                    rec.missed += 1
                    score = update_reliability(self.reliability[node_id], False, self.config.alpha)
                    self.reliability[node_id] = score
                    self.cluster.set_reliability(node_id, score.score)
                if rec.missed >= self.config.failure_threshold:
                    rec.status = "dead"
                    died.append(node_id)
                    self._fail_over(node_id)
        return died

    def _fail_over(self, node_id: str) -> None:
        log.warning("node %s declared dead", node_id)
        result = self.cluster.handle_failure(node_id)
        for record in self.queries.values():
            for sqid in record.deployments:
                if sqid in self.cluster.plans:
                    record.deployments[sqid] = self.cluster.plans[sqid]
        affected: dict[str, set] = {}
        for cmd in result.commands:
            qid = cmd.payload["query_id"]
            record = self.queries[qid]
            dp = record.deployments[cmd.payload["subquery_id"]]
            payload = dict(cmd.payload)
            if cmd.kind in (CommandKind.PROMOTE_REPLICA, CommandKind.DEPLOY_OPERATOR,
                            CommandKind.ASSIGN_REPLICA):
                payload["specs"] = [self._stage_spec(record, dp, s) for s in cmd.payload["stages"]]
            issued = self._issue(cmd.target, cmd.kind, payload)
            if cmd.kind is CommandKind.DEPLOY_OPERATOR:
                issued = self._issue(cmd.target, CommandKind.START_QUERY,
                                     {"query_id": qid, "stages": cmd.payload["stages"]})
            if cmd.kind in (CommandKind.PROMOTE_REPLICA, CommandKind.DEPLOY_OPERATOR):
                record.awaiting[cmd.target] = issued.command_id
                affected.setdefault(qid, set()).update(cmd.payload["stages"])
        for qid, stages in affected.items():
            record = self.queries[qid]
            for dp in record.deployments.values():
                self._rewire_upstream(record, dp, stages)
        for qid in set(result.degraded) | set(affected):
            record = self.queries[qid]
            if record.state is S.RUNNING:
                note = f"node {node_id} lost"
                self._transition(record, S.DEGRADED, note)
        for esc in result.escalations:
            record = self.queries.get(esc.query_id)
            sq = record.subqueries[0] if record and record.subqueries else None
            # the region tier re-runs placement; a resolvable outcome would need a
            # full redeploy, which failover never does, so the query stays Degraded
            rec = self.region.escalate(esc.cluster_id or CLUSTER, esc.reason, sq)
            if record is not None:
                record.reason = f"escalated ({esc.reason}): {rec.detail}"
        self._advance_states()

    def _rewire_upstream(self, record: QueryRecord, dp: DeploymentPlan, moved: set) -> None:
        chain = list(dp.assignments)
        for k, a in enumerate(chain):
            if a.stage not in moved or k == 0:
                continue
            up = chain[k - 1]
            if up.node_id == a.node_id or self.nodes[up.node_id].status != "alive":
                continue
            node = self.nodes[a.node_id].descriptor
            self._issue(up.node_id, CommandKind.REASSIGN_ENDPOINT, {
                "query_id": record.query_id, "stage": up.stage, "edge": k,
                "address": [node.host, node.data_port]})

    def _on_fault(self, node_id: str, fault: dict) -> None:
        qid = fault.get("query_id")
        record = self.queries.get(qid)
        if record is None:
            return
        record.faults.append({"node_id": node_id, **fault})
        if record.state is S.RUNNING:
            self._transition(record, S.DEGRADED, f"operator fault on {node_id}: {fault.get('reason', '')}")

    def _on_command_failure(self, node_id: str, failed: dict) -> None:
        qid = (failed.get("payload") or {}).get("query_id") or failed.get("query_id")
        record = self.queries.get(qid)
        if record is None:
            return
        note = f"command {failed.get('command_id')} failed on {node_id}: {failed.get('error', '')}"
        record.faults.append({"node_id": node_id, "reason": note})
        if record.state is S.DEPLOYING:
            self._transition(record, S.FAILED, note)
        elif record.state is S.RUNNING:
            self._transition(record, S.DEGRADED, note)

    def _advance_states(self) -> None:
        for record in self.queries.values():
            if record.state not in (S.DEPLOYING, S.DEGRADED) or not record.awaiting:
                continue
            done = all(self.nodes[n].acked_through >= cid or self.nodes[n].status != "alive"
                       for n, cid in record.awaiting.items())
            if done:
                record.awaiting = {}
                if record.state is S.DEPLOYING or not self._unresolved(record):
                    self._transition(record, S.RUNNING, "all start commands acknowledged")

    def _unresolved(self, record: QueryRecord) -> bool:
        for dp in record.deployments.values():
            for a in dp.assignments:
                if self.nodes[a.node_id].status != "alive":
                    return True
        return False

    # -- queries ------------------------------------------------------------------
    def register_query(self, doc: dict) -> str:
        with self.lock:
            query_id = f"q{next(self._query_ids)}"
            try:
                plan = LogicalPlan.from_doc(doc, query_id)
            except (KeyError, TypeError, ValueError) as exc:
                raise PlanError([f"malformed query document: {exc}"]) from exc
            try:
                schema = self.get_schema(plan.source)
            except NotFoundError as exc:
                raise PlanError([f"unknown source schema {plan.source!r}"]) from exc
            plan = LogicalPlan(plan.query_id, schema.name, plan.operators, plan.sink, plan.execution)
            validated = validate_plan(plan, schema)
            record = QueryRecord(query_id, plan, schema, validated.schemas,
                                 replication=bool(doc.get("replication", False)))
            self.queries[query_id] = record
            self._transition(record, S.REGISTERED, "received")
            record.optimized = optimize(plan, schema)
            self._transition(record, S.OPTIMIZED, ", ".join(record.optimized.provenance) or "no rewrites")
            self._try_deploy(record)
            return query_id

    def get_query(self, query_id: str) -> dict:
        with self.lock:
            record = self.queries.get(query_id)
            if record is None:
                raise NotFoundError(f"no query {query_id!r}")
            doc = record.to_doc()
            doc["metrics"] = self._query_metrics(record)
            return doc

    def list_queries(self) -> list[dict]:
        with self.lock:
            return [{"query_id": q.query_id, "state": q.state.value, "reason": q.reason}
                    for q in self.queries.values()]

    def stop_query(self, query_id: str) -> dict:
        with self.lock:
            record = self.queries.get(query_id)
            if record is None:
                raise NotFoundError(f"no query {query_id!r}")
            if record.state in TERMINAL:
                return record.to_doc()
            for dp in record.deployments.values():
                nodes = list(dict.fromkeys([a.node_id for a in dp.assignments] + [r for r, _ in dp.replicas]))
                for node_id in nodes:
                    if self.nodes[node_id].status == "alive":
                        self._issue(node_id, CommandKind.STOP_QUERY, {"query_id": query_id})
                for node_id in self.cluster.release(dp.subquery_id):
                    if self.nodes[node_id].status == "alive":
                        self._issue(node_id, CommandKind.REASSIGN_ROLE, {"role": NodeRole.SLEEPER.value})
            record.awaiting = {}
            self._transition(record, S.STOPPED, "stopped on request")
            return record.to_doc()

    def _transition(self, record: QueryRecord, state: QueryState, note: str = "") -> None:
        if record.history and state not in ALLOWED[record.state]:
            raise RuntimeError(f"illegal transition {record.state.value} -> {state.value}")
        record.state = state
        record.history.append((state, self.clock(), note))
        if state is S.FAILED:
            record.reason = note

    def _retry_pending(self) -> None:
        for record in self.queries.values():
            if record.state is S.OPTIMIZED:
                self._try_deploy(record)

    def _try_deploy(self, record: QueryRecord) -> None:
        if not self.cluster_active():
            record.reason = "waiting for the cluster to activate"
            return
        topo = Topology.single(record.plan.source, REGION, CLUSTER)
        try:
            subqueries = split(record.optimized, topo)
            plans = [self.cluster.place(sq, record.replication) for sq in subqueries]
        except EscalationSignal as exc:
            rec = self.region.escalate(CLUSTER, str(exc), subqueries[0], record.replication)
            if rec.resolved:
                plans = [rec.plan]
            else:
                self._transition(record, S.FAILED, f"capacity: {exc}")
                return
        except PlacementError as exc:
            # the source or sink node has not registered yet; retried on registration
            record.reason = f"waiting: {exc}"
            return
        record.subqueries = subqueries
        record.reason = ""
        for dp in plans:
            self.cluster.commit(dp)
            record.deployments[dp.subquery_id] = dp
        self._transition(record, S.DEPLOYING, "commands issued")
        for dp in plans:
            self._deploy(record, dp)
        self._advance_states()

    # -- command generation ---------------------------------------------------------
    def _operator_for(self, record: QueryRecord, stage: str):
        if stage.startswith("op"):
            return record.optimized.operators[int(stage[2:])]
        return None

    def _chain_schemas(self, record: QueryRecord, dp: DeploymentPlan) -> list[tuple[Schema, Schema]]:
        """(schema in, schema out) for every position of the deployed chain."""
        current = record.schema
        out = []
        for a in dp.assignments:
            op = self._operator_for(record, a.stage)
            if op is None:
                out.append((current, current))
                continue
            nxt = validate_plan(LogicalPlan("_", current.name, (op,), record.plan.sink), current).output_schema
            out.append((current, nxt))
            current = nxt
        return out

    def _module_ref(self, kind: str) -> str:
        data = module_bytes(kind)
        module_id = hashlib.sha256(data).hexdigest()[:16]
        self.modules[module_id] = data
        return module_id

    def _stage_spec(self, record: QueryRecord, dp: DeploymentPlan, stage: str) -> dict:
        chain = list(dp.assignments)
        k = next(i for i, a in enumerate(chain) if a.stage == stage)
        a = chain[k]
        schemas = self._chain_schemas(record, dp)
        schema_in, schema_out = schemas[k]
        spec = {
            "query_id": record.query_id, "subquery_id": dp.subquery_id, "stage": stage,
            "role": {"source": "source", "sink": "sink"}.get(stage, "gateway" if a.role is NodeRole.GATEWAY
                                                              else "operator"),
            "position": k, "execution": record.plan.execution,
            "schema_in": schema_in.to_doc(), "schema_out": schema_out.to_doc(),
            "input": None, "output": None, "kind": None, "module_id": None, "config": None,
        }
        op = self._operator_for(record, stage)
        if op is not None:
            spec["kind"] = kind_of(op)
            spec["module_id"] = self._module_ref(spec["kind"])
            spec["config"] = _b64(config_for(op, schema_in))
        if k > 0:
            spec["input"] = {"stream_id": stream_id_for(record.query_id, k).hex(),
                             "schema_id": schema_in.schema_id}
        if k + 1 < len(chain):
            nxt = self.nodes[chain[k + 1].node_id].descriptor
            spec["output"] = {"stream_id": stream_id_for(record.query_id, k + 1).hex(),
                              "schema_id": schema_out.schema_id,
                              "address": [nxt.host, nxt.data_port]}
        return spec

    def _deploy(self, record: QueryRecord, dp: DeploymentPlan) -> None:
        chain = list(dp.assignments)
        by_node: dict[str, list[str]] = {}
        for a in reversed(chain):  # receivers first so senders find them bound
            by_node.setdefault(a.node_id, []).insert(0, a.stage)
        for node_id, stages in by_node.items():
            for stage in stages:
                self._issue(node_id, CommandKind.DEPLOY_OPERATOR, self._stage_spec(record, dp, stage))
        for r, c in dp.replicas:
            stages = dp.stages_on(c)
            self._issue(r, CommandKind.ASSIGN_REPLICA, {
                "query_id": record.query_id, "subquery_id": dp.subquery_id, "stages": stages,
                "guarded_node": c, "specs": [self._stage_spec(record, dp, s) for s in stages]})
        for node_id, stages in by_node.items():
            cmd = self._issue(node_id, CommandKind.START_QUERY,
                              {"query_id": record.query_id, "stages": stages})
            record.awaiting[node_id] = cmd.command_id

    def _issue(self, node_id: str, kind: CommandKind, payload: dict) -> Command:
        return self.logs[node_id].append(Command(node_id, kind, payload))

    def resync(self, node_id: str) -> None:
        """Re-issue everything a node should be running; used past the replay horizon."""
        with self.lock:
            for record in self.queries.values():
                if record.state in TERMINAL:
                    continue
                for dp in record.deployments.values():
                    stages = dp.stages_on(node_id)
                    for stage in stages:
                        self._issue(node_id, CommandKind.DEPLOY_OPERATOR, self._stage_spec(record, dp, stage))
                    for r, c in dp.replicas:
                        if r == node_id:
                            guarded = dp.stages_on(c)
                            self._issue(node_id, CommandKind.ASSIGN_REPLICA, {
                                "query_id": record.query_id, "subquery_id": dp.subquery_id,
                                "stages": guarded, "guarded_node": c,
                                "specs": [self._stage_spec(record, dp, s) for s in guarded]})
                    if stages:
                        self._issue(node_id, CommandKind.START_QUERY,
                                    {"query_id": record.query_id, "stages": stages})

    # -- metadata -------------------------------------------------------------------
    def _query_metrics(self, record: QueryRecord) -> dict:
        out = {}
        for dp in record.deployments.values():
            for a in dp.assignments:
                rec = self.nodes.get(a.node_id)
                key = f"{record.query_id}/{a.stage}"
                sample = rec.latest.get(key) if rec else None
                if sample is not None:
                    doc = sample.to_doc()
                    doc["total_in"], doc["total_out"] = rec.totals.get(key, (0, 0))
                    out[a.stage] = doc
        return out

    def metadata(self) -> dict:
        with self.lock:
            load = self.cluster.load()
            live = [r for r in self.nodes.values() if r.status == "alive"]
            workers = [r for r in live if r.descriptor.kind == "worker"]
            throughput = 0.0
            for r in live:
                for s in r.latest.values():
                    span = (s.window_end - s.window_start) / 1e9
                    if span > 0 and r.descriptor.kind == "sink":
                        throughput += s.tuples_in / span
            running = [sq for q in self.queries.values() if q.state in (S.RUNNING, S.DEGRADED, S.DEPLOYING)
                       for sq in q.deployments]
            cluster = {
                "cluster_id": CLUSTER,
                "active": self.cluster_active(),
                "nodes": len(live),
                "free_capacity": sum(max(0, r.descriptor.capacity - load.get(r.descriptor.node_id, 0))
                                     for r in workers),
                "running_subqueries": sorted(running),
                "sink_throughput": throughput,
                "sources": {r.descriptor.source_schema: r.descriptor.node_id
                            for r in live if r.descriptor.kind == "source"},
            }
            return {"updated_at": self.metadata_updated_at,
                    "regions": {REGION: {"clusters": {CLUSTER: cluster},
                                         "free_capacity": cluster["free_capacity"],
                                         "running_subqueries": cluster["running_subqueries"],
                                         "escalations": [
                                             {"cluster_id": e.cluster_id, "reason": e.reason,
                                              "query_id": e.query_id, "resolved": e.resolved,
                                              "detail": e.detail} for e in self.region.records]}}}
