"""Operator placement, node roles, reliability scoring, failover and escalation.

Everything here is deterministic: ties between equally reliable nodes are
broken by lexicographic node id.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .errors import EscalationSignal, PlacementError
from .model import Command, CommandKind, NodeDescriptor, NodeRole, SubQuery

log = logging.getLogger(__name__)

ALPHA = 0.1
FAILURE_THRESHOLD = 3
ACTIVATION_THRESHOLD = 2
INITIAL_RELIABILITY = 0.5
HISTORY = 32


@dataclass(frozen=True)
class ReliabilityScore:
    node_id: str
    score: float = INITIAL_RELIABILITY
    history: tuple[bool, ...] = ()


def update_reliability(r: ReliabilityScore, heartbeat_ok: bool, alpha: float = ALPHA) -> ReliabilityScore:
    """Exponentially weighted moving average over heartbeat outcomes."""
    indicator = 1.0 if heartbeat_ok else 0.0
    score = alpha * indicator + (1.0 - alpha) * r.score
    return ReliabilityScore(r.node_id, min(1.0, max(0.0, score)), (r.history + (heartbeat_ok,))[-HISTORY:])


def rank_key(node: NodeDescriptor):
    return (-node.reliability, node.node_id)


# -- stages and plans -------------------------------------------------------

PRODUCER = "producer"
CONSUMER = "consumer"
SINK = "sink"
GATEWAY = "gateway"


@dataclass(frozen=True)
class Stage:
    name: str
    kind: str
    operator: object = None
    index: int | None = None  # chain position for consumer stages


def stages_for(sq: SubQuery) -> list[Stage]:
    stages = []
    if sq.upstream.kind == "source":
        stages.append(Stage("source", PRODUCER))
    else:
        stages.append(Stage("gateway-in", GATEWAY))
    for i, op in enumerate(sq.operators):
        stages.append(Stage(f"op{sq.offset + i}", CONSUMER, op, sq.offset + i))
    if sq.downstream.kind == "sink":
        stages.append(Stage("sink", SINK))
    else:
        stages.append(Stage("gateway-out", GATEWAY))
    return stages


_STAGE_ROLE = {PRODUCER: NodeRole.PRODUCER, CONSUMER: NodeRole.CONSUMER,
               SINK: NodeRole.SINK, GATEWAY: NodeRole.GATEWAY}


@dataclass(frozen=True)
class Assignment:
    stage: str
    node_id: str
    role: NodeRole


@dataclass(frozen=True)
class DeploymentPlan:
    subquery_id: str
    query_id: str
    assignments: tuple[Assignment, ...]
    # (replica node, guarded consumer node)
    replicas: tuple[tuple[str, str], ...] = ()

    def node_for(self, stage: str) -> str:
        for a in self.assignments:
            if a.stage == stage:
                return a.node_id
        raise KeyError(stage)

    def stages_on(self, node_id: str) -> list[str]:
        return [a.stage for a in self.assignments if a.node_id == node_id]

    def replica_of(self, node_id: str) -> str | None:
        for r, c in self.replicas:
            if c == node_id:
                return r
        return None

    def load(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        gateways = set()
        for a in self.assignments:
            if a.role is NodeRole.CONSUMER:
                counts[a.node_id] = counts.get(a.node_id, 0) + 1
            elif a.role is NodeRole.GATEWAY and a.node_id not in gateways:
                gateways.add(a.node_id)
                counts[a.node_id] = counts.get(a.node_id, 0) + 1
        for r, _ in self.replicas:
            counts[r] = counts.get(r, 0) + 1
        return counts

    def to_doc(self) -> dict:
        return {
            "subquery_id": self.subquery_id,
            "query_id": self.query_id,
            "assignments": [{"stage": a.stage, "node_id": a.node_id, "role": a.role.value}
                            for a in self.assignments],
            "replicas": [{"replica": r, "guards": c} for r, c in self.replicas],
        }


def _compute_candidates(nodes) -> list[NodeDescriptor]:
    workers = [n for n in nodes if n.kind == "worker"]
    sleepers = sorted((n for n in workers if n.role is NodeRole.SLEEPER), key=rank_key)
    # the cluster manager's duties run inside the coordinator, so its device
    # is usable for operators once the sleepers are exhausted
    managers = sorted((n for n in workers if n.role is NodeRole.MANAGER), key=rank_key)
    return sleepers + managers


def _pick(candidates, load, capacity, exclude=()) -> NodeDescriptor | None:
    """Fresh node first (best rank), otherwise the most spare capacity."""
    for n in candidates:
        if n.node_id not in exclude and load.get(n.node_id, 0) == 0:
            return n
    best = None
    best_spare = 0
    for n in candidates:
        if n.node_id in exclude:
            continue
        spare = capacity[n.node_id] - load.get(n.node_id, 0)
        if spare > best_spare:
            best, best_spare = n, spare
    return best


def place(sq: SubQuery, nodes, replication: bool = False, base_load: dict | None = None) -> DeploymentPlan:
    """Assign every stage of ``sq`` to a node.

    ``nodes`` are the live nodes of the cluster with their current roles.
    ``base_load`` counts operators already running per node (other queries).
    Raises EscalationSignal when capacity runs out and PlacementError when
    the source or sink node is missing.
    """
    nodes = list(nodes)
    capacity = {n.node_id: n.capacity for n in nodes}
    load = dict(base_load or {})
    candidates = _compute_candidates(nodes)
    assignments: list[Assignment] = []
    stages = stages_for(sq)

    for stage in stages:
        if stage.kind == PRODUCER:
            owners = sorted((n for n in nodes if n.kind == "source" and n.source_schema == sq.source),
                            key=lambda n: n.node_id)
            if not owners:
                raise PlacementError(f"no node owns source {sq.source!r}")
            assignments.append(Assignment(stage.name, owners[0].node_id, NodeRole.PRODUCER))
        elif stage.kind == SINK:
            sinks = sorted((n for n in nodes if n.kind == "sink" and n.sink_name == sq.sink),
                           key=lambda n: n.node_id)
            if not sinks:
                raise PlacementError(f"no sink node named {sq.sink!r}")
            assignments.append(Assignment(stage.name, sinks[0].node_id, NodeRole.SINK))

    for stage in stages:
        if stage.kind not in (CONSUMER, GATEWAY):
            continue
        if stage.kind == GATEWAY:
            choice = next((n for n in candidates if load.get(n.node_id, 0) == 0), None)
        else:
            choice = _pick(candidates, load, capacity)
        if choice is None:
            raise EscalationSignal(f"capacity: no node left for stage {stage.name} of {sq.subquery_id}")
        load[choice.node_id] = load.get(choice.node_id, 0) + 1
        assignments.append(Assignment(stage.name, choice.node_id, _STAGE_ROLE[stage.kind]))

    order = {s.name: i for i, s in enumerate(stages)}
    assignments.sort(key=lambda a: order[a.stage])

    replicas: list[tuple[str, str]] = []
    if replication:
        spare = [n for n in candidates
                 if n.role is NodeRole.SLEEPER and load.get(n.node_id, 0) == 0]
        guarded = []
        for a in assignments:
            if a.role is NodeRole.CONSUMER and a.node_id not in guarded:
                guarded.append(a.node_id)
        for c in guarded:
            if not spare:
                break
            r = spare.pop(0)
            replicas.append((r.node_id, c))
    return DeploymentPlan(sq.subquery_id, sq.query_id, tuple(assignments), tuple(replicas))


# -- runtime role bookkeeping -----------------------------------------------

@dataclass
class RoleState:
    node_id: str
    role: NodeRole
    guarded_node: str | None = None
    assigned_operators: list[str] = field(default_factory=list)


@dataclass
class FailoverResult:
    commands: list[Command] = field(default_factory=list)
    degraded: list[str] = field(default_factory=list)  # query ids
    escalations: list[EscalationSignal] = field(default_factory=list)
    recovered: list[str] = field(default_factory=list)  # query ids rewired successfully

    def kinds(self) -> list[str]:
        return [c.kind.value for c in self.commands]


class ClusterRoles:
    """Role state of one cluster.  Not thread-safe; callers serialize access."""

    def __init__(self, cluster_id: str = "c0"):
        self.cluster_id = cluster_id
        self.nodes: dict[str, NodeDescriptor] = {}
        self.states: dict[str, RoleState] = {}
        self.plans: dict[str, DeploymentPlan] = {}
        self.dead: set[str] = set()

    # registry ---------------------------------------------------------------
    def upsert(self, node: NodeDescriptor) -> None:
        self.nodes[node.node_id] = node
        self.dead.discard(node.node_id)
        if node.node_id not in self.states:
            self.states[node.node_id] = RoleState(node.node_id, node.role)

    def set_reliability(self, node_id: str, score: float) -> None:
        self.nodes[node_id] = self.nodes[node_id].with_(reliability=score)

    def role_of(self, node_id: str) -> NodeRole:
        return self.states[node_id].role

    def live_nodes(self) -> list[NodeDescriptor]:
        return [n.with_(role=self.states[n.node_id].role)
                for n in self.nodes.values() if n.node_id not in self.dead]

    def load(self) -> dict[str, int]:
        total: dict[str, int] = {}
        for plan in self.plans.values():
            for k, v in plan.load().items():
                total[k] = total.get(k, 0) + v
        return total

    # placement --------------------------------------------------------------
    def place(self, sq: SubQuery, replication: bool = False) -> DeploymentPlan:
        return place(sq, self.live_nodes(), replication, self.load())

    def commit(self, plan: DeploymentPlan) -> None:
        self.plans[plan.subquery_id] = plan
        for a in plan.assignments:
            st = self.states[a.node_id]
            st.assigned_operators.append(f"{plan.subquery_id}/{a.stage}")
            if st.role is not NodeRole.MANAGER:
                st.role = a.role
        for r, c in plan.replicas:
            st = self.states[r]
            st.role, st.guarded_node = NodeRole.REPLICA, c

    def release(self, subquery_id: str) -> list[str]:
        """Forget a stopped subquery; nodes left idle return to sleeper."""
        plan = self.plans.pop(subquery_id, None)
        if plan is None:
            return []
        touched = {a.node_id for a in plan.assignments} | {r for r, _ in plan.replicas}
        freed = []
        for node_id in sorted(touched):
            st = self.states[node_id]
            st.assigned_operators = [s for s in st.assigned_operators if not s.startswith(subquery_id + "/")]
            still_guarding = any(r == node_id for p in self.plans.values() for r, _ in p.replicas)
            if not st.assigned_operators and not still_guarding and st.role is not NodeRole.MANAGER:
                if self.nodes[node_id].kind == "worker" and st.role is not NodeRole.SLEEPER:
                    st.role, st.guarded_node = NodeRole.SLEEPER, None
                    freed.append(node_id)
        return freed

    # failure handling -------------------------------------------------------
    def _best_sleeper(self, exclude=()) -> NodeDescriptor | None:
        load = self.load()
        for n in sorted(self.live_nodes(), key=rank_key):
            if (n.kind == "worker" and n.role is NodeRole.SLEEPER
                    and n.node_id not in exclude and load.get(n.node_id, 0) == 0):
                return n
        return None

    def handle_failure(self, failed: str) -> FailoverResult:
        """Rewire around a dead node without stopping any query."""
        result = FailoverResult()
        if failed in self.dead or failed not in self.states:
            return result
        self.dead.add(failed)
        for sqid in list(self.plans):
            plan = self.plans[sqid]
            on_failed = [a for a in plan.assignments if a.node_id == failed]
            if any(a.role in (NodeRole.PRODUCER, NodeRole.SINK) for a in on_failed):
                role = next(a.role.value for a in on_failed if a.role in (NodeRole.PRODUCER, NodeRole.SINK))
                result.degraded.append(plan.query_id)
                result.escalations.append(
                    EscalationSignal(f"{role} node {failed} lost for {plan.query_id}", self.cluster_id,
                                     plan.query_id))
            working = [a for a in on_failed if a.role in (NodeRole.CONSUMER, NodeRole.GATEWAY)]
            if working:
                plan = self._take_over(plan, failed, working, result)
            if any(r == failed for r, _ in plan.replicas):
                plan = self._replace_replica(plan, failed, result)
            self.plans[sqid] = plan
        st = self.states[failed]
        st.assigned_operators = []
        st.guarded_node = None
        return result

    def _take_over(self, plan: DeploymentPlan, failed: str, working, result: FailoverResult) -> DeploymentPlan:
        stages = [a.stage for a in working]
        replica = plan.replica_of(failed)
        if replica is not None and replica not in self.dead:
            result.commands.append(Command(replica, CommandKind.PROMOTE_REPLICA, {
                "query_id": plan.query_id, "subquery_id": plan.subquery_id,
                "stages": stages, "failed_node": failed}))
            assignments = tuple(replace(a, node_id=replica) if a.node_id == failed else a
                                for a in plan.assignments)
            replicas = tuple(p for p in plan.replicas if p != (replica, failed))
            st = self.states[replica]
            st.role, st.guarded_node = NodeRole.CONSUMER, None
            st.assigned_operators.extend(f"{plan.subquery_id}/{s}" for s in stages)
            plan = replace(plan, assignments=assignments, replicas=replicas)
            self.plans[plan.subquery_id] = plan
            fresh = self._best_sleeper()
            if fresh is not None:
                result.commands.append(Command(fresh.node_id, CommandKind.ASSIGN_REPLICA, {
                    "query_id": plan.query_id, "subquery_id": plan.subquery_id,
                    "stages": plan.stages_on(replica), "guarded_node": replica}))
                self.states[fresh.node_id].role = NodeRole.REPLICA
                self.states[fresh.node_id].guarded_node = replica
                plan = replace(plan, replicas=plan.replicas + ((fresh.node_id, replica),))
            result.recovered.append(plan.query_id)
            return plan

        # no standing replica: re-place each stage on the best remaining node
        assignments = list(plan.assignments)
        for a in working:
            self.plans[plan.subquery_id] = replace(plan, assignments=tuple(assignments))
            load = self.load()
            capacity = {n.node_id: n.capacity for n in self.live_nodes()}
            choice = _pick(_compute_candidates(self.live_nodes()), load, capacity)
            if choice is None:
                result.degraded.append(plan.query_id)
                result.escalations.append(EscalationSignal(
                    f"capacity: cannot re-place {a.stage} of {plan.subquery_id}", self.cluster_id,
                    plan.query_id))
                continue
            idx = assignments.index(a)
            assignments[idx] = replace(a, node_id=choice.node_id)
            st = self.states[choice.node_id]
            if st.role is not NodeRole.MANAGER:
                st.role = a.role
            st.assigned_operators.append(f"{plan.subquery_id}/{a.stage}")
            result.commands.append(Command(choice.node_id, CommandKind.DEPLOY_OPERATOR, {
                "query_id": plan.query_id, "subquery_id": plan.subquery_id, "stages": [a.stage],
                "failed_node": failed}))
        plan = replace(plan, assignments=tuple(assignments))
        if plan.query_id not in result.degraded:
            result.recovered.append(plan.query_id)
        return plan

    def _replace_replica(self, plan: DeploymentPlan, failed: str, result: FailoverResult) -> DeploymentPlan:
        kept = []
        for r, c in plan.replicas:
            if r != failed:
                kept.append((r, c))
                continue
            self.plans[plan.subquery_id] = replace(plan, replicas=tuple(kept))
            fresh = self._best_sleeper()
            if fresh is None:
                log.warning("replica %s of %s lost and no sleeper can replace it", failed, c)
                continue
            result.commands.append(Command(fresh.node_id, CommandKind.ASSIGN_REPLICA, {
                "query_id": plan.query_id, "subquery_id": plan.subquery_id,
                "stages": plan.stages_on(c), "guarded_node": c}))
            self.states[fresh.node_id].role = NodeRole.REPLICA
            self.states[fresh.node_id].guarded_node = c
            kept.append((fresh.node_id, c))
        return replace(plan, replicas=tuple(kept))


# -- escalation --------------------------------------------------------------

@dataclass(frozen=True)
class EscalationRecord:
    cluster_id: str
    reason: str
    query_id: str | None
    resolved: bool
    detail: str = ""
    plan: DeploymentPlan | None = None


def bridge_clusters(plan: DeploymentPlan, cluster_of: dict, nodes) -> DeploymentPlan:
    """Insert gateway assignments wherever adjacent stages sit in different clusters.

    Each cluster gets one gateway node that serves all of its crossings.
    """
    load = plan.load()
    taken = {a.node_id for a in plan.assignments} | {r for r, _ in plan.replicas}
    spare = sorted((n for n in nodes if n.kind == "worker" and n.role is NodeRole.SLEEPER
                    and n.node_id not in taken and load.get(n.node_id, 0) == 0), key=rank_key)
    gateways: dict[str, str] = {}

    def gateway(cluster):
        if cluster not in gateways:
            gw = next((n for n in spare if cluster_of[n.node_id] == cluster), None)
            if gw is None:
                raise EscalationSignal(f"no gateway node available in cluster {cluster}", cluster)
            spare.remove(gw)
            gateways[cluster] = gw.node_id
        return gateways[cluster]

    out: list[Assignment] = []
    chain = list(plan.assignments)
    for i, a in enumerate(chain):
        out.append(a)
        if i + 1 == len(chain):
            break
        here, there = cluster_of[a.node_id], cluster_of[chain[i + 1].node_id]
        if here != there:
            out.append(Assignment(f"gateway-out:{here}->{there}", gateway(here), NodeRole.GATEWAY))
            out.append(Assignment(f"gateway-in:{here}->{there}", gateway(there), NodeRole.GATEWAY))
    return replace(plan, assignments=tuple(out))


class RegionTier:
    """Region manager: re-places escalated work over every cluster it governs."""

    def __init__(self, region_id: str, clusters: dict[str, ClusterRoles]):
        self.region_id = region_id
        self.clusters = clusters
        self.records: list[EscalationRecord] = []

    def escalate(self, cluster_id: str, reason: str, sq: SubQuery | None = None,
                 replication: bool = False) -> EscalationRecord:
        if sq is None:
            rec = EscalationRecord(cluster_id, reason, None, False, "nothing to re-place")
            self.records.append(rec)
            return rec
        nodes = []
        cluster_of = {}
        load: dict[str, int] = {}
        # the escalating cluster's nodes first, siblings after, each in rank order
        order = [cluster_id] + sorted(c for c in self.clusters if c != cluster_id)
        for cid in order:
            roles = self.clusters[cid]
            for n in roles.live_nodes():
                nodes.append(n)
                cluster_of[n.node_id] = cid
            for k, v in roles.load().items():
                load[k] = load.get(k, 0) + v
        reserved: set[str] = set()
        while True:
            usable = [n for n in nodes if n.node_id not in reserved]
            try:
                plan = place(sq, usable, replication, load)
                plan = bridge_clusters(plan, cluster_of, nodes)
            except EscalationSignal as exc:
                # a cluster without a spare gateway gives up its weakest worker for that duty
                short = [n for n in sorted(usable, key=rank_key, reverse=True)
                         if n.kind == "worker" and n.role is NodeRole.SLEEPER
                         and cluster_of[n.node_id] == exc.cluster_id]
                if exc.cluster_id in self.clusters and short and not str(exc).startswith("capacity"):
                    reserved.add(short[0].node_id)
                    continue
                rec = EscalationRecord(cluster_id, reason, sq.query_id, False, f"capacity: {exc}")
            except PlacementError as exc:
                rec = EscalationRecord(cluster_id, reason, sq.query_id, False, f"capacity: {exc}")
            else:
                rec = EscalationRecord(cluster_id, reason, sq.query_id, True, "re-placed in region", plan)
            break
        self.records.append(rec)
        return rec


def escalate(cluster_id: str, reason: str, region: RegionTier | None = None,
             sq: SubQuery | None = None, replication: bool = False) -> EscalationRecord:
    if region is None:
        return EscalationRecord(cluster_id, reason, sq.query_id if sq else None, False,
                                "capacity: no region tier above this cluster")
    return region.escalate(cluster_id, reason, sq, replication)
