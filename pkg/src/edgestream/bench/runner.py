"""Orchestration of benchmark runs: a local coordinator, worker processes,
an in-process source and sink, then post-hoc collection."""
from __future__ import annotations

import json
import logging
import os
import subprocess
import sys
import threading
import time
from importlib import resources

from ..agent import Agent, AgentConfig, SourceFeed
from ..client import CoordinatorClient
from ..coordinator import CoordinatorConfig, CoordinatorServer
from ..model import ELEC_SCHEMA, LogicalPlan
from ..runtime import make_operator
from .report import BenchReport, collect
from .source import SourceConfig, load_csv
from .synth import synth_elec

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    pass


def load_query(path=None) -> dict:
    """The canned evaluation query, or a query document from ``path``."""
    if path is None:
        text = resources.files("edgestream.bench").joinpath("queries/evaluation.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return json.loads(text)


def expected_outputs(doc: dict, payloads, schema=ELEC_SCHEMA) -> list[bytes]:
    """What the sink should receive, computed in-process with native operators."""
    plan = LogicalPlan.from_doc(doc, "expected")
    chain = []
    for op in plan.operators:
        h = make_operator(op, schema, "native")
        chain.append(h)
        schema = h.schema_out
    out = []
    for p in payloads:
        for h in chain:
            p, _ = h.invoke(p)
            if p is None:
                break
        if p is not None:
            out.append(p)
    return out


def _wait(pred, timeout: float, what: str, step: float = 0.05):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        v = pred()
        if v:
            return v
        time.sleep(step)
    raise RunError(f"timed out waiting for {what}")


def spawn_worker(url: str, node_id: str, metrics_dir, log_path, capacity: int = 1) -> subprocess.Popen:
    cmd = [sys.executable, "-m", "edgestream", "agent", "--coordinator", url, "--node-id", node_id,
           "--capacity", str(capacity), "--metrics-dir", str(metrics_dir)]
    fh = open(log_path, "ab")
    try:
        return subprocess.Popen(cmd, stdout=fh, stderr=subprocess.STDOUT)
    finally:
        fh.close()


def _payloads(cfg: SourceConfig | None, run_dir, budget: int, seed: int):
    if cfg is None:
        path = os.path.join(run_dir, "elec.csv")
        synth_elec(budget, seed, path)
        payloads, _ = load_csv(path)
        return payloads, 0, path
    payloads, skipped = load_csv(cfg.csv_path, cfg.schema)
    return payloads, skipped, cfg.csv_path


def run_eval(rate: float, mode: str = "sandbox", duration: float = 10.0, out_dir="bench-runs",
             query=None, csv_path: str | None = None, workers: int = 2, seed: int = 7,
             heartbeat_interval: float = 0.5, timeout: float = 60.0) -> BenchReport:
    """One end-to-end run of ``query`` at ``rate`` T/s for ``duration`` seconds."""
    doc = dict(query if isinstance(query, dict) else load_query(query))
    doc["execution"] = mode
    run_dir = os.path.join(str(out_dir), f"{mode}-{int(rate) if float(rate).is_integer() else rate}")
    os.makedirs(run_dir, exist_ok=True)
    for name in os.listdir(run_dir):  # a rerun replaces the previous raw files
        if name.endswith((".csv", ".jsonl", ".frames", ".json", ".log")):
            os.remove(os.path.join(run_dir, name))
    budget = int(round(rate * duration))
    cfg = None if csv_path is None else SourceConfig(csv_path, rate=rate, duration=duration, loop=True)
    payloads, skipped, data_path = _payloads(cfg, run_dir, budget, seed)
    if not payloads:
        raise RunError("no input tuples")
    feed = SourceFeed(payloads, rate, limit=budget, loop=True, gate=threading.Event())
    emitted_inputs = [payloads[i % len(payloads)] for i in range(budget)]
    expected = len(expected_outputs(doc, emitted_inputs))

    server = CoordinatorServer(CoordinatorConfig(listen="127.0.0.1:0", heartbeat_interval=heartbeat_interval))
    server.start()
    procs: list[subprocess.Popen] = []
    agents: list[Agent] = []
    api = CoordinatorClient(server.url)
    try:
        api.register_schema(ELEC_SCHEMA.to_doc())
        for i in range(1, workers + 1):
            node_id = f"w{i}"
            procs.append(spawn_worker(server.url, node_id, run_dir, os.path.join(run_dir, f"agent-{node_id}.log")))
            # one at a time so the first worker deterministically becomes the manager
            _wait(lambda: any(n["node_id"] == node_id for n in api.list_nodes()), 30, f"{node_id} to register")
        sink_name = doc["sink"]["name"]
        sink = Agent(AgentConfig(server.url, node_id="sink", kind="sink", sink_name=sink_name,
                                 metrics_dir=run_dir)).start()
        agents.append(sink)
        source = Agent(AgentConfig(server.url, node_id="source", kind="source", source_schema=doc["source"],
                                   metrics_dir=run_dir), feed=feed).start()
        agents.append(source)
        qid = api.register_query(doc)
        _wait(lambda: api.get_query(qid)["state"] == "Running", 30, "the query to start")
        feed.gate.set()
        _wait(lambda: qid in source.source_summaries, duration * 3 + timeout, "the source to finish")
        _wait(lambda: all(st.completed for st in sink.stages.values()) and sink.stages, timeout,
              "end-of-stream at the sink")
        qdoc = api.get_query(qid)
        api.stop_query(qid)
        time.sleep(heartbeat_interval * 1.5)  # let workers report their last windows
        run = {"mode": mode, "rate": rate, "query": doc.get("name", doc.get("description", "query")),
               "query_doc": doc, "query_id": qid, "duration_s": duration, "same_host": True,
               "stages": [[s["stage"], s["node_id"]] for s in qdoc["stages"]],
               "source": source.source_summaries[qid], "expected_delivered": expected,
               "skipped_rows": skipped, "data": data_path, "history": qdoc["history"]}
    finally:
        for a in agents:
            a.stop()
        for p in procs:
            p.terminate()
        for p in procs:
            try:
                p.wait(15)
            except subprocess.TimeoutExpired:
                p.kill()
        server.stop()
    with open(os.path.join(run_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(run, fh, indent=2)
    return collect(run_dir)


def produce(cfg: SourceConfig, coordinator: str, query=None, mode: str = "sandbox",
            node_id: str = "source", timeout: float = 3600.0, metrics_dir=None, **agent_options) -> dict:
    """Join a running coordinator as the source and emit ``cfg``'s tuples.

    When ``query`` is given it is registered first (with ``mode``); otherwise
    emission starts whenever a query over this source is deployed.
    """
    payloads, skipped = load_csv(cfg.csv_path, cfg.schema)
    feed = SourceFeed(payloads, cfg.rate, limit=cfg.budget, loop=cfg.loop)
    agent = Agent(AgentConfig(coordinator, node_id=node_id, kind="source", source_schema=cfg.schema.name,
                              metrics_dir=metrics_dir, **agent_options), feed=feed).start()
    api = CoordinatorClient(coordinator)
    try:
        if query is not None:
            doc = dict(query if isinstance(query, dict) else load_query(query))
            doc["execution"] = mode
            api.register_schema(cfg.schema.to_doc())  # idempotent
            api.register_query(doc)
        summary = _wait(lambda: next(iter(agent.source_summaries.values()), None), timeout, "emission")
    finally:
        agent.leave()
    return {**summary, "skipped_rows": skipped}
