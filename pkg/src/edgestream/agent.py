"""Worker agent: registers with the coordinator, follows its commands,
runs operator stages and reports metrics through heartbeats.

The same agent also plays the source and sink roles for the bench harness:
a ``source`` agent paces tuples from a feed into its output stream, a
``sink`` agent records what arrives.
"""
from __future__ import annotations

import base64
import csv
import json
import logging
import os
import queue
import signal
import struct
import threading
import time
from dataclasses import dataclass

from .client import CoordinatorClient, CoordinatorError
from .errors import NotFoundError, OperatorFault, StreamError
from .model import MetricsSample, NodeRole, Schema
from .pacing import TokenBucket
from .runtime import NativeOperator, OperatorModule, load_operator
from .transport import QUEUE_SIZE, StreamListener, StreamSender

log = logging.getLogger(__name__)

_TS = struct.Struct("<Q")
OPT_COLUMNS = ("query_id", "stage", "mode", "t_before_ns", "t_after_ns", "opt_ns")
WINDOW_COLUMNS = ("node_id", "query_id", "stage", "window_start", "window_end", "tuples_in", "tuples_out",
                  "opt_sum", "queue_depth", "busy_fraction", "first_ts", "last_ts")
LATENCY_COLUMNS = ("query_id", "ingress_ts_ns", "egress_ts_ns", "latency_ns")


@dataclass
class SourceFeed:
    """What a source agent emits: pre-encoded tuples, a rate and an optional bound."""

    payloads: list
    rate: float
    limit: int | None = None
    loop: bool = False
    gate: threading.Event | None = None  # emission waits until set

    def __iter__(self):
        n = 0
        while True:
            for p in self.payloads:
                if self.limit is not None and n >= self.limit:
                    return
                yield p
                n += 1
            if not self.loop or not self.payloads:
                return


@dataclass
class AgentConfig:
    coordinator: str
    data_port: int = 0
    node_id: str | None = None
    capacity: int = 1
    host: str = "127.0.0.1"
    kind: str = "worker"
    source_schema: str | None = None
    sink_name: str | None = None
    metrics_dir: str | None = None
    execution: str | None = None  # overrides the query's mode when set
    queue_size: int = QUEUE_SIZE
    socket_buffer: int | None = None  # SO_RCVBUF/SO_SNDBUF for data streams; kernel default when None
    startup_retries: int = 20
    keep_sink_frames: bool = True

    @classmethod
    def from_env(cls, **flags) -> "AgentConfig":
        env = {
            "coordinator": os.environ.get("EDGESTREAM_COORDINATOR"),
            "data_port": os.environ.get("EDGESTREAM_DATA_PORT"),
            "node_id": os.environ.get("EDGESTREAM_NODE_ID"),
            "capacity": os.environ.get("EDGESTREAM_CAPACITY"),
            "metrics_dir": os.environ.get("EDGESTREAM_METRICS_DIR"),
        }
        merged = {k: v for k, v in env.items() if v not in (None, "")}
        merged.update({k: v for k, v in flags.items() if v is not None})
        if "coordinator" not in merged:
            raise ValueError("coordinator URL missing (flag or EDGESTREAM_COORDINATOR)")
        for k in ("data_port", "capacity"):
            if k in merged:
                merged[k] = int(merged[k])
        return cls(**merged)


class Window:
    """Per-stage metric accumulator, swapped out at every heartbeat."""

    def __init__(self):
        self.lock = threading.Lock()
        self.reset(time.monotonic_ns())

    def reset(self, start: int) -> None:
        self.start = start
        self.tuples_in = self.tuples_out = self.opt_sum = 0
        self.first_ts = self.last_ts = None

    def add(self, n_in: int, n_out: int, opt: int = 0) -> None:
        now = time.monotonic_ns()
        with self.lock:
            self.tuples_in += n_in
            self.tuples_out += n_out
            self.opt_sum += opt
            if self.first_ts is None:
                self.first_ts = now
            self.last_ts = now

    def cut(self, node_id: str, stage_key: str, queue_depth: int) -> MetricsSample | None:
        now = time.monotonic_ns()
        with self.lock:
            if now <= self.start:
                return None
            s = MetricsSample.from_window(node_id, self.start, now, self.tuples_in, self.tuples_out,
                                          self.opt_sum, queue_depth, stage=stage_key,
                                          first_ts=self.first_ts, last_ts=self.last_ts)
            self.reset(now)
            return s


class MetricsFiles:
    """Raw sample files under the metrics directory; a no-op when none is set."""

    def __init__(self, directory: str | None, node_id: str):
        self.dir = directory
        self.node_id = node_id
        self.lock = threading.Lock()
        self._files: dict = {}
        if directory:
            os.makedirs(directory, exist_ok=True)

    def _writer(self, name: str, columns):
        if name not in self._files:
            path = os.path.join(self.dir, name)
            fh = open(path, "a", newline="", encoding="utf-8")
            w = csv.writer(fh)
            if fh.tell() == 0:
                w.writerow(columns)
            self._files[name] = (fh, w)
        return self._files[name][1]

    def row(self, name: str, columns, values) -> None:
        if not self.dir:
            return
        with self.lock:
            self._writer(f"{name}-{self.node_id}.csv", columns).writerow(values)

    def rows(self, name: str, columns, values_list) -> None:
        if not self.dir or not values_list:
            return
        with self.lock:
            self._writer(f"{name}-{self.node_id}.csv", columns).writerows(values_list)

    def json(self, name: str, doc: dict) -> None:
        if not self.dir:
            return
        with self.lock:
            with open(os.path.join(self.dir, name), "a", encoding="utf-8") as fh:
                fh.write(json.dumps(doc) + "\n")

    def binary(self, name: str):
        if not self.dir:
            return None
        return open(os.path.join(self.dir, name), "ab")

    def flush(self) -> None:
        with self.lock:
            for fh, _ in self._files.values():
                fh.flush()

    def close(self) -> None:
        with self.lock:
            for fh, _ in self._files.values():
                fh.close()
            self._files.clear()


class Stage:
    """One deployed stage with its own processing thread."""

    def __init__(self, agent: "Agent", spec: dict, handle=None):
        self.agent = agent
        self.spec = spec
        self.query_id = spec["query_id"]
        self.name = spec["stage"]
        self.role = spec["role"]
        self.key = f"{self.query_id}/{self.name}"
        self.handle = handle
        self.mode = agent.mode_for(spec)
        self.window = Window()
        self.rx = None
        self.tx: StreamSender | None = None
        self.thread: threading.Thread | None = None
        self.stop_evt = threading.Event()
        self.completed = False
        self.fault: str | None = None
        self.emitted = 0
        self.delivered = 0
        self.first_tuple_at: float | None = None
        self._sink_fh = None
        if spec.get("input"):
            self.rx = agent.listener.open(bytes.fromhex(spec["input"]["stream_id"]),
                                          spec["input"]["schema_id"], agent.config.queue_size)
        if spec.get("output"):
            out = spec["output"]
            self.tx = StreamSender(tuple(out["address"]), bytes.fromhex(out["stream_id"]), out["schema_id"],
                                   queue_size=agent.config.queue_size, sndbuf=agent.config.socket_buffer)

    @property
    def started(self) -> bool:
        return self.thread is not None

    def start(self) -> None:
        if self.thread is not None:
            return
        target = self._run_source if self.role == "source" else self._run_stream
        self.thread = threading.Thread(target=target, name=f"stage:{self.key}", daemon=True)
        self.thread.start()

    def queue_depth(self) -> int:
        if self.tx is not None:
            return self.tx.depth()
        if self.rx is not None:
            return self.rx._q.qsize()
        return 0

    # lanes -------------------------------------------------------------------------
    def _run_source(self) -> None:
        feed = self.agent.feed
        if feed is None:
            self._halt("source stage deployed on an agent without a feed")
            return
        if feed.gate is not None:
            while not feed.gate.wait(0.1):
                if self.stop_evt.is_set():
                    return
        bucket = TokenBucket(feed.rate)
        t0 = time.monotonic()
        last = t0
        try:
            for payload in feed:
                if self.stop_evt.is_set():
                    break
                bucket.take()
                stamped = payload[:4] + _TS.pack(time.time_ns()) + payload[12:]
                self.tx.send(stamped)
                last = time.monotonic()
                self.emitted += 1
                self.window.add(0, 1)
        except StreamError as exc:
            self._halt(f"send failed: {exc}")
            return
        elapsed = last - t0
        drained = self.tx.close(timeout=60)
        self.completed = True
        summary = {"query_id": self.query_id, "node_id": self.agent.node_id, "emitted": self.emitted,
                   "lost_in_transport": self.tx.stats.lost, "drained": drained,
                   "rate": feed.rate, "elapsed_s": elapsed,
                   "achieved_rate": self.emitted / elapsed if elapsed > 0 else 0.0}
        self.agent.source_summaries[self.query_id] = summary
        self.agent.files.json(f"source-{self.agent.node_id}.jsonl", summary)

    def _run_stream(self) -> None:
        files = self.agent.files
        opt_rows: list = []
        latency_rows: list = []
        if self.role == "sink" and self.agent.config.keep_sink_frames:
            self._sink_fh = files.binary(f"sink-{self.agent.node_id}-{self.query_id}.frames")
        try:
            while not self.stop_evt.is_set():
                try:
                    item = self.rx.recv(timeout=0.2)
                except queue.Empty:
                    self._flush(opt_rows, latency_rows)
                    continue
                if item is None:
                    self.completed = True
                    break
                if self.first_tuple_at is None:
                    self.first_tuple_at = time.monotonic()
                if self.role == "sink":
                    now = time.time_ns()
                    ingress = _TS.unpack_from(item, 4)[0]
                    latency_rows.append((self.query_id, ingress, now, now - ingress))
                    self.delivered += 1
                    self.window.add(1, 0)
                    if self._sink_fh is not None:
                        self._sink_fh.write(struct.pack(">I", len(item)) + item)
                    if self.agent.on_deliver is not None:
                        self.agent.on_deliver(self.query_id, item)
                elif self.role == "gateway":
                    self.window.add(1, 1)
                    self.tx.send(item)
                else:
                    try:
                        out, sample = self.handle.invoke(item)
                    except OperatorFault as exc:
                        self._halt(f"operator fault: {exc.reason}")
                        return
                    self.window.add(1, 0 if out is None else 1, sample.t_after - sample.t_before)
                    opt_rows.append((self.query_id, self.name, self.mode, sample.t_before, sample.t_after,
                                     sample.t_after - sample.t_before))
                    if out is not None:
                        self.tx.send(out)
                if len(opt_rows) >= 512 or len(latency_rows) >= 512:
                    self._flush(opt_rows, latency_rows)
        except StreamError as exc:
            self._halt(f"downstream stream failed: {exc}")
            return
        finally:
            self._flush(opt_rows, latency_rows)
            if self._sink_fh is not None:
                self._sink_fh.close()
                self._sink_fh = None
        if self.completed and self.tx is not None:
            self.tx.close(timeout=60)  # propagate end-of-stream

    def _flush(self, opt_rows, latency_rows) -> None:
        if opt_rows:
            self.agent.files.rows("opt", OPT_COLUMNS, opt_rows)
            opt_rows.clear()
        if latency_rows:
            self.agent.files.rows("latency", LATENCY_COLUMNS, latency_rows)
            latency_rows.clear()
        if self._sink_fh is not None:
            self._sink_fh.flush()

    def _halt(self, reason: str) -> None:
        log.error("stage %s halted: %s", self.key, reason)
        self.fault = reason
        self.agent.report_fault(self, reason)

    def stop(self, drain: bool = True) -> None:
        self.stop_evt.set()
        if self.thread is not None and self.thread is not threading.current_thread():
            self.thread.join(10)
        if self.tx is not None:
            if drain:
                self.tx.close(timeout=10)
            else:
                self.tx.abort()
        if self.rx is not None:
            self.agent.listener.drop(self.rx.stream_id)
        if self.handle is not None:
            self.handle.close()


class Agent:
    def __init__(self, config: AgentConfig, feed: SourceFeed | None = None, on_deliver=None):
        self.config = config
        self.feed = feed
        self.on_deliver = on_deliver
        self.api = CoordinatorClient(config.coordinator)
        self.node_id = config.node_id
        self.role = NodeRole.SLEEPER
        self.listener: StreamListener | None = None
        self.stages: dict[tuple, Stage] = {}
        self.replicas: dict[tuple, dict] = {}  # (query, stage) -> {"spec", "handle"}
        self.modules: dict[str, bytes] = {}
        self.source_summaries: dict[str, dict] = {}
        self.events: list[dict] = []
        self.acked_through = 0
        self.last_seen = 0
        self.heartbeat_interval = 1.0
        self._faults: list[dict] = []
        self._failed: list[dict] = []
        self._final_samples: list = []  # last windows of stages torn down between beats
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._stream = None
        self._threads: list[threading.Thread] = []
        self.files = MetricsFiles(None, "pending")

    # lifecycle ---------------------------------------------------------------------
    def start(self) -> "Agent":
        self.listener = StreamListener(self.config.host, self.config.data_port,
                                       rcvbuf=self.config.socket_buffer)
        self._register()
        self.files = MetricsFiles(self.config.metrics_dir, self.node_id)
        for target, name in ((self._heartbeat_loop, "heartbeat"), (self._command_loop, "commands")):
            t = threading.Thread(target=target, name=f"{name}:{self.node_id}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def _register(self) -> None:
        doc = {"node_id": self.node_id, "host": self.config.host, "data_port": self.listener.port,
               "capacity": self.config.capacity, "kind": self.config.kind,
               "source_schema": self.config.source_schema, "sink_name": self.config.sink_name}
        delay = 0.1
        for attempt in range(self.config.startup_retries):
            try:
                resp = self.api.register_node(doc)
                break
            except (OSError, CoordinatorError) as exc:
                log.warning("coordinator unreachable (%s), retry %d", exc, attempt + 1)
                time.sleep(delay)
                delay = min(2.0, delay * 2)
        else:
            raise SystemExit(f"could not register with {self.config.coordinator}")
        self.node_id = resp["node_id"]
        self.role = NodeRole(resp["role"])
        self.heartbeat_interval = float(resp["heartbeat_interval"])
        # anything older belongs to a previous incarnation of this node
        self.last_seen = self.acked_through = int(resp.get("last_command_id", 0))

    def stop(self, drain: bool = False) -> None:
        self._stop.set()
        if self._stream is not None:
            self._stream.close()
        with self._lock:
            for key in list(self.stages):
                self._retire(key, drain=drain)
        self._send_heartbeat()
        if self.listener is not None:
            self.listener.close()
        self.files.close()

    def kill(self) -> None:
        """Vanish without a goodbye: no drain, no final heartbeat."""
        self._stop.set()
        if self._stream is not None:
            self._stream.close()
        with self._lock:
            for st in list(self.stages.values()):
                st.stop_evt.set()
                if st.tx is not None:
                    st.tx.abort()
            self.stages.clear()
        if self.listener is not None:
            self.listener.close()

    def leave(self) -> None:
        """Stop and deregister so that going away is not treated as a failure."""
        if not self._stop.is_set():
            self.stop(drain=True)
        try:
            self.api.deregister(self.node_id)
        except (OSError, CoordinatorError, NotFoundError):
            pass

    def mode_for(self, spec: dict) -> str:
        return self.config.execution or spec.get("execution") or "sandbox"

    def report_fault(self, stage: Stage, reason: str) -> None:
        with self._lock:
            self._faults.append({"query_id": stage.query_id, "stage": stage.name, "reason": reason})

    # heartbeat ---------------------------------------------------------------------
    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_interval):
            self._send_heartbeat()

    def _send_heartbeat(self) -> None:
        with self._lock:
            samples, self._final_samples = self._final_samples, []
            for st in self.stages.values():
                s = st.window.cut(self.node_id, st.key, st.queue_depth())
                if s is not None:
                    samples.append(s)
            faults, self._faults = self._faults, []
            failed, self._failed = self._failed, []
            doc = {"acked_through": self.acked_through, "samples": [s.to_doc() for s in samples],
                   "faults": faults, "failed_commands": failed,
                   "completed": [st.key for st in self.stages.values() if st.completed]}
        for s in samples:
            self.files.row("windows", WINDOW_COLUMNS, [
                s.node_id, s.stage.split("/")[0], s.stage.split("/", 1)[1], s.window_start, s.window_end,
                s.tuples_in, s.tuples_out, s.opt_sum, s.queue_depth, s.busy_fraction, s.first_ts, s.last_ts])
        self.files.flush()
        try:
            self.api.heartbeat(self.node_id, doc)
        except NotFoundError:
            if not self._stop.is_set():
                log.warning("coordinator no longer knows %s; re-registering", self.node_id)
                self._rejoin()
        except (OSError, CoordinatorError) as exc:
            log.debug("heartbeat failed: %s", exc)
            with self._lock:  # try again next time
                self._faults = faults + self._faults
                self._failed = failed + self._failed

    def _rejoin(self) -> None:
        with self._lock:
            for st in list(self.stages.values()):
                st.stop(drain=False)
            self.stages.clear()
            self.replicas.clear()
        self._register()
        if self._stream is not None:
            self._stream.close()

    # commands ----------------------------------------------------------------------
    def _command_loop(self) -> None:
        delay = 0.05
        while not self._stop.is_set():
            try:
                self._stream = self.api.events(self.node_id, self.last_seen, timeout=30)
                delay = 0.05
                for cmd in self._stream:
                    if self._stop.is_set():
                        return
                    if cmd.command_id <= self.last_seen:
                        continue
                    self.execute(cmd)
            except NotFoundError:
                pass
            except (OSError, CoordinatorError, ValueError) as exc:
                log.debug("event stream dropped: %s", exc)
            finally:
                if self._stream is not None:
                    self._stream.close()
            self._stop.wait(delay)
            delay = min(1.0, delay * 2)

    def execute(self, cmd) -> None:
        """Run one command.  Replaying a command that already took effect is harmless."""
        handler = getattr(self, "_on_" + cmd.kind.value)
        try:
            with self._lock:
                handler(cmd.payload)
        except Exception as exc:  # reported, never fatal for the agent
            log.exception("command %s (%s) failed", cmd.command_id, cmd.kind.value)
            with self._lock:
                self._failed.append({"command_id": cmd.command_id, "kind": cmd.kind.value,
                                     "error": str(exc), "payload": {"query_id": cmd.payload.get("query_id")}})
        self.last_seen = max(self.last_seen, cmd.command_id)
        self.acked_through = max(self.acked_through, cmd.command_id)
        self.events.append({"command_id": cmd.command_id, "kind": cmd.kind.value, "at": time.monotonic()})

    def _module(self, module_id: str) -> bytes:
        if module_id not in self.modules:
            self.modules[module_id] = self.api.fetch_module(module_id)
        return self.modules[module_id]

    def _load(self, spec: dict):
        if spec.get("kind") is None:
            return None
        schema_in = Schema.from_doc(spec["schema_in"])
        blob = base64.b64decode(spec["config"])
        op_id = f"{spec['query_id']}/{spec['stage']}"
        if self.mode_for(spec) == "native":
            return NativeOperator(spec["kind"], blob, schema_in, op_id)
        return load_operator(OperatorModule(self._module(spec["module_id"]), spec["kind"], blob),
                             schema_in, op_id)

    def _install(self, spec: dict, handle=None) -> Stage:
        key = (spec["query_id"], spec["stage"])
        current = self.stages.get(key)
        if current is not None:
            if current.spec == spec:
                return current
            self._retire(key, drain=False)
        st = Stage(self, spec, handle if handle is not None else self._load(spec))
        self.stages[key] = st
        return st

    def _on_DeployOperator(self, p: dict) -> None:
        self._install(p)

    def _on_StartQuery(self, p: dict) -> None:
        for name in p.get("stages") or [k[1] for k in self.stages if k[0] == p["query_id"]]:
            st = self.stages.get((p["query_id"], name))
            if st is None:
                raise KeyError(f"stage {name} of {p['query_id']} was never deployed here")
            st.start()

    def _retire(self, key, drain: bool) -> None:
        st = self.stages.pop(key)
        st.stop(drain=drain)
        s = st.window.cut(self.node_id, st.key, 0)
        if s is not None:
            self._final_samples.append(s)

    def _on_StopQuery(self, p: dict) -> None:
        qid = p["query_id"]
        for key in [k for k in self.stages if k[0] == qid]:
            self._retire(key, drain=True)
        for key in [k for k in self.replicas if k[0] == qid]:
            entry = self.replicas.pop(key)
            if entry["handle"] is not None:
                entry["handle"].close()
        if not self.stages and self.role is not NodeRole.MANAGER and self.config.kind == "worker":
            self.role = NodeRole.SLEEPER

    def _on_AssignReplica(self, p: dict) -> None:
        for spec in p.get("specs", []):
            key = (spec["query_id"], spec["stage"])
            entry = self.replicas.get(key)
            if entry is not None and entry["spec"] == spec:
                continue
            self.replicas[key] = {"spec": spec, "handle": self._load(spec)}  # warm, no streams
        if self.role is not NodeRole.MANAGER:
            self.role = NodeRole.REPLICA

    def _on_PromoteReplica(self, p: dict) -> None:
        received = time.monotonic()
        for spec in p.get("specs", []):
            key = (spec["query_id"], spec["stage"])
            if key in self.stages and self.stages[key].started:
                continue  # already promoted
            warm = self.replicas.pop(key, None)
            handle = None
            if warm is not None and warm["spec"].get("module_id") == spec.get("module_id") \
                    and warm["spec"].get("config") == spec.get("config"):
                handle = warm["handle"]
            st = self._install(spec, handle)
            st.start()
            self.files.json(f"events-{self.node_id}.jsonl", {"event": "promoted", "stage": st.key,
                                                             "warm": handle is not None,
                                                             "at_monotonic": received})
        if self.role is not NodeRole.MANAGER:
            self.role = NodeRole.CONSUMER

    def _on_ReassignEndpoint(self, p: dict) -> None:
        st = self.stages.get((p["query_id"], p["stage"]))
        if st is None or st.tx is None:
            raise KeyError(f"no outbound stream for {p['query_id']}/{p['stage']}")
        if tuple(st.tx.address) != tuple(p["address"]):
            st.tx.reassign(tuple(p["address"]))
            # keep the stored stage description current so a replayed deploy is still recognised
            st.spec = {**st.spec, "output": {**st.spec["output"], "address": list(p["address"])}}

    def _on_ReassignRole(self, p: dict) -> None:
        self.role = NodeRole(p["role"])

    # inspection ----------------------------------------------------------------------
    def snapshot(self) -> dict:
        with self._lock:
            return {
                "node_id": self.node_id,
                "role": self.role.value,
                "stages": {f"{q}/{s}": {"started": st.started, "completed": st.completed, "fault": st.fault}
                           for (q, s), st in self.stages.items()},
                "replicas": sorted(f"{q}/{s}" for q, s in self.replicas),
            }


def run_agent(config: AgentConfig) -> int:
    def _term(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, _term)
    agent = Agent(config).start()
    log.info("agent %s up on data port %d", agent.node_id, agent.listener.port)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        agent.stop()
    return 0
