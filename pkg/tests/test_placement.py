import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgestream.errors import EscalationSignal, PlacementError
from edgestream.model import (
    CommandKind, Comparator, Endpoint, NodeDescriptor, NodeRole, Predicate, Projection, Selection,
    SubQuery,
)
from edgestream.placement import (
    ClusterRoles, RegionTier, ReliabilityScore, escalate, place, update_reliability,
)

S = NodeRole.SLEEPER


def node(nid, rel=0.5, role=S, cap=1, kind="worker", **kw):
    return NodeDescriptor(nid, reliability=rel, role=role, capacity=cap, kind=kind, **kw)


SRC = node("src", kind="source", role=NodeRole.PRODUCER, source_schema="elec")
SNK = node("snk", kind="sink", role=NodeRole.SINK, sink_name="out")


def chain(n_ops, qid="q1"):
    ops = tuple(Selection((Predicate("Period", Comparator.GT, i),)) for i in range(n_ops))
    return SubQuery(f"{qid}.0", qid, ops, Endpoint("source", "r0"), Endpoint("sink", "r0"), "r0",
                    0, "elec", "out")


EVAL = SubQuery("q1.0", "q1", (Selection((Predicate("NSWprice", Comparator.GT, 0.5),)),
                               Projection(("Date", "Period"))),
                Endpoint("source", "r0"), Endpoint("sink", "r0"), "r0", 0, "elec", "out")


# -- reliability ----------------------------------------------------------------

def test_reliability_single_success():
    assert update_reliability(ReliabilityScore("n"), True).score == pytest.approx(0.55, abs=1e-12)


def test_reliability_ten_misses_matches_recurrence():
    r = ReliabilityScore("n", 1.0)
    expect = 1.0
    for _ in range(10):
        r = update_reliability(r, False)
        expect = 0.9 * expect
    assert r.score == pytest.approx(expect, abs=1e-12)
    assert r.score == pytest.approx(0.3487, abs=1e-4)
    assert r.history == (False,) * 10


def test_reliability_zero_is_fixed_point():
    assert update_reliability(ReliabilityScore("n", 0.0), False).score == 0.0


@given(st.floats(0, 1), st.lists(st.booleans(), max_size=60))
def test_reliability_stays_in_unit_interval(start, outcomes):
    r = ReliabilityScore("n", start)
    for ok in outcomes:
        r = update_reliability(r, ok)
        assert 0.0 <= r.score <= 1.0
    assert len(r.history) <= 32


# -- place ------------------------------------------------------------------------

def test_evaluation_split_over_two_equal_sleepers():
    plan = place(EVAL, [SNK, node("pi-b"), SRC, node("pi-a")])
    assert plan.node_for("op0") == "pi-a"
    assert plan.node_for("op1") == "pi-b"
    assert plan.node_for("source") == "src" and plan.node_for("sink") == "snk"
    roles = {a.stage: a.role for a in plan.assignments}
    assert roles == {"source": NodeRole.PRODUCER, "op0": NodeRole.CONSUMER,
                     "op1": NodeRole.CONSUMER, "sink": NodeRole.SINK}


def test_replication_picks_next_best_sleeper():
    nodes = [SRC, SNK, node("a", 0.6), node("b", 0.9), node("c", 0.7)]
    plan = place(chain(1), nodes, replication=True)
    assert plan.node_for("op0") == "b"
    assert plan.replicas == (("c", "b"),)


def test_no_sleepers_escalates():
    with pytest.raises(EscalationSignal):
        place(chain(1), [SRC, SNK])


def test_missing_sink_or_source():
    with pytest.raises(PlacementError, match="sink"):
        place(chain(1), [SRC, node("a")])
    with pytest.raises(PlacementError, match="source"):
        place(chain(1), [SNK, node("a")])


def test_round_robin_by_spare_capacity():
    nodes = [SRC, SNK, node("a", 0.9, cap=2), node("b", 0.8, cap=4)]
    plan = place(chain(5), nodes)
    stages = [plan.node_for(f"op{i}") for i in range(5)]
    # one each, then most spare: b(3) b(2) then a(1) vs b(1) tie -> a by rank order
    assert stages == ["a", "b", "b", "b", "a"]
    with pytest.raises(EscalationSignal):
        place(chain(7), nodes)


def test_manager_used_only_after_sleepers():
    nodes = [SRC, SNK, node("h", 1.0, role=NodeRole.MANAGER), node("s1", 0.2)]
    plan = place(chain(2), nodes)
    assert [plan.node_for("op0"), plan.node_for("op1")] == ["s1", "h"]


def test_gateway_stage_gets_gateway_role():
    sq = SubQuery("q.0", "q", (Selection((Predicate("Day", Comparator.EQ, 1),)),),
                  Endpoint("source", "A"), Endpoint("gateway", "A", "B"), "A", 0, "elec", "out")
    plan = place(sq, [SRC, node("a", 0.9), node("b", 0.4)])
    assert plan.node_for("gateway-out") == "b"
    assert [a.role for a in plan.assignments if a.stage.startswith("gateway")] == [NodeRole.GATEWAY]


def random_nodes(rng, n):
    nodes = [SRC, SNK]
    for i in range(n):
        role = rng.choice([S, S, S, NodeRole.MANAGER, NodeRole.CONSUMER])
        nodes.append(node(f"n{i:03d}", round(rng.random(), 2), role, cap=rng.randint(1, 3)))
    rng.shuffle(nodes)
    return nodes


def test_thousand_random_node_sets():
    rng = random.Random(23)
    placed = escalated = 0
    for _ in range(1000):
        nodes = random_nodes(rng, rng.randint(0, 8))
        sq = chain(rng.randint(1, 6))
        repl = rng.random() < 0.5
        try:
            plan = place(sq, nodes, repl)
        except EscalationSignal:
            escalated += 1
            continue
        placed += 1
        # determinism, including under input reordering
        assert place(sq, list(reversed(nodes)), repl) == plan
        by_id = {n.node_id: n for n in nodes}
        # every stage exactly once
        assert sorted(a.stage for a in plan.assignments) == sorted(
            ["source", "sink"] + [f"op{i}" for i in range(len(sq.operators))])
        # capacity safety
        for nid, used in plan.load().items():
            assert used <= by_id[nid].capacity
        # only sleepers or the manager run operators
        used_ids = set(plan.load())
        assert all(by_id[n].role in (S, NodeRole.MANAGER) for n in used_ids)
        # reliability ordering against sleepers left idle
        idle = [n for n in nodes if n.role is S and n.node_id not in used_ids]
        for a in plan.assignments:
            if a.role is NodeRole.CONSUMER and by_id[a.node_id].role is S:
                assert all(by_id[a.node_id].reliability >= i.reliability for i in idle)
        # replicas guard distinct consumers from sleepers that run nothing else
        guarded = [c for _, c in plan.replicas]
        assert len(set(guarded)) == len(guarded)
        for r, c in plan.replicas:
            assert by_id[r].role is S and r not in plan.stages_on(r) + [c]
            assert not plan.stages_on(r)
    assert placed > 300 and escalated > 50


# -- failover ------------------------------------------------------------------

def cluster(*nodes):
    roles = ClusterRoles()
    for n in nodes:
        roles.upsert(n)
    return roles


def test_consumer_with_replica_fails():
    roles = cluster(SRC, SNK, node("a", 0.9), node("b", 0.8), node("c", 0.7))
    roles.commit(roles.place(chain(1), replication=True))
    assert roles.role_of("b") is NodeRole.REPLICA
    res = roles.handle_failure("a")
    assert res.kinds() == ["PromoteReplica", "AssignReplica"]
    assert res.commands[0].target == "b" and res.commands[1].target == "c"
    assert res.commands[1].payload["guarded_node"] == "b"
    plan = roles.plans["q1.0"]
    assert plan.node_for("op0") == "b" and plan.replicas == (("c", "b"),)
    assert roles.role_of("b") is NodeRole.CONSUMER
    assert not res.degraded and not res.escalations


def test_replica_fails():
    roles = cluster(SRC, SNK, node("a", 0.9), node("b", 0.8), node("c", 0.7))
    roles.commit(roles.place(chain(1), replication=True))
    res = roles.handle_failure("b")
    assert res.kinds() == ["AssignReplica"]
    assert res.commands[0].target == "c"
    assert roles.plans["q1.0"].replicas == (("c", "a"),)


def test_consumer_without_replica_is_redeployed():
    roles = cluster(SRC, SNK, node("a", 0.9), node("b", 0.8))
    roles.commit(roles.place(chain(1)))
    res = roles.handle_failure("a")
    assert res.kinds() == ["DeployOperator"]
    assert res.commands[0].target == "b"
    assert roles.plans["q1.0"].node_for("op0") == "b"


def test_last_node_for_stage_escalates():
    roles = cluster(SRC, SNK, node("a", 0.9), node("b", 0.8))
    roles.commit(roles.place(chain(2)))
    res = roles.handle_failure("a")
    assert res.escalations and res.degraded == ["q1"]
    # the surviving stage is untouched
    assert roles.plans["q1.0"].node_for("op1") == "b"
    assert all(c.kind is not CommandKind.STOP_QUERY for c in res.commands)


def test_producer_loss_degrades():
    roles = cluster(SRC, SNK, node("a"))
    roles.commit(roles.place(chain(1)))
    res = roles.handle_failure("src")
    assert res.degraded == ["q1"] and res.escalations
    assert res.commands == []


def test_failure_is_idempotent():
    roles = cluster(SRC, SNK, node("a", 0.9), node("b", 0.8), node("c", 0.7))
    roles.commit(roles.place(chain(1), replication=True))
    roles.handle_failure("a")
    assert roles.handle_failure("a").commands == []


def replica_invariant(roles):
    for plan in roles.plans.values():
        consumers = {a.node_id for a in plan.assignments if a.role is NodeRole.CONSUMER}
        guards = [c for _, c in plan.replicas]
        for c in consumers:
            assert guards.count(c) == 1, (c, plan)
        for r, c in plan.replicas:
            assert r not in roles.dead and c in consumers


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_replica_invariant_under_failure_sequences(seed):
    rng = random.Random(seed)
    n_ops = rng.randint(1, 3)
    # enough sleepers for every consumer, its replica and one replacement per failure
    failures = rng.randint(1, 4)
    workers = [node(f"w{i:02d}", round(rng.random(), 3)) for i in range(2 * n_ops + failures)]
    roles = cluster(SRC, SNK, *workers)
    roles.commit(roles.place(chain(n_ops), replication=True))
    replica_invariant(roles)
    for _ in range(failures):
        plan = roles.plans["q1.0"]
        busy = sorted({a.node_id for a in plan.assignments if a.role is NodeRole.CONSUMER}
                      | {r for r, _ in plan.replicas})
        res = roles.handle_failure(rng.choice(busy))
        assert not res.escalations
        replica_invariant(roles)


def test_release_returns_nodes_to_sleep():
    roles = cluster(SRC, SNK, node("a", 0.9), node("b", 0.8))
    roles.commit(roles.place(chain(1), replication=True))
    assert sorted(roles.release("q1.0")) == ["a", "b"]
    assert roles.role_of("a") is S and roles.role_of("b") is S
    assert roles.role_of("src") is NodeRole.PRODUCER


# -- escalation ---------------------------------------------------------------

def test_escalation_to_sibling_cluster_bridges_with_gateways():
    c0 = cluster(SRC, SNK, node("a", 0.9))
    c1 = cluster(node("x", 0.5), node("y", 0.5), node("z", 0.5))
    region = RegionTier("r0", {"c0": c0, "c1": c1})
    with pytest.raises(EscalationSignal):
        c0.place(chain(2))
    rec = escalate("c0", "capacity", region, chain(2))
    assert rec.resolved
    stages = [(a.stage, a.node_id, a.role) for a in rec.plan.assignments]
    # c0's only worker turns gateway, the operators move into the sibling cluster
    assert stages == [
        ("source", "src", NodeRole.PRODUCER),
        ("gateway-out:c0->c1", "a", NodeRole.GATEWAY),
        ("gateway-in:c0->c1", "z", NodeRole.GATEWAY),
        ("op0", "x", NodeRole.CONSUMER),
        ("op1", "y", NodeRole.CONSUMER),
        ("gateway-out:c1->c0", "z", NodeRole.GATEWAY),
        ("gateway-in:c1->c0", "a", NodeRole.GATEWAY),
        ("sink", "snk", NodeRole.SINK),
    ]


def test_escalation_with_everything_exhausted():
    c0 = cluster(SRC, SNK, node("a"))
    region = RegionTier("r0", {"c0": c0, "c1": cluster()})
    rec = region.escalate("c0", "capacity", chain(3))
    assert not rec.resolved and rec.detail.startswith("capacity")
    assert region.records == [rec]


def test_escalation_without_region():
    rec = escalate("c0", "capacity", None, chain(1))
    assert not rec.resolved and "capacity" in rec.detail
