"""HTTP front end of the coordinator, including the SSE command channel."""
from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from ..errors import ConflictError, NotFoundError, PlanError, SchemaError
from .config import CoordinatorConfig
from .core import Coordinator

log = logging.getLogger(__name__)

KEEPALIVE = 5.0


def sse_event(cmd) -> bytes:
    data = json.dumps(cmd.to_doc(), separators=(",", ":"))
    return f"id: {cmd.command_id}\nevent: {cmd.kind.value}\ndata: {data}\n\n".encode()


class _Handler(BaseHTTPRequestHandler):
    server_version = "edgestream"
    protocol_version = "HTTP/1.1"

    @property
    def core(self) -> Coordinator:
        return self.server.coordinator

    def log_message(self, fmt, *args):
        log.debug("%s - " + fmt, self.address_string(), *args)

    # helpers ---------------------------------------------------------------------
    def _body(self) -> dict:
        n = int(self.headers.get("Content-Length") or 0)
        if n == 0:
            return {}
        doc = json.loads(self.rfile.read(n))
        if not isinstance(doc, dict):
            raise ValueError("request body must be a JSON object")
        return doc

    def _send(self, status: int, doc, content_type="application/json") -> None:
        body = doc if isinstance(doc, bytes) else json.dumps(doc).encode()
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _dispatch(self, method: str) -> None:
        url = urlsplit(self.path)
        parts = [p for p in url.path.split("/") if p]
        query = parse_qs(url.query)
        try:
            route = getattr(self, f"_{method}_{parts[0] if parts else 'root'}", None)
            if route is None:
                raise NotFoundError(f"no route {method.upper()} {url.path}")
            route(parts[1:], query)
        except NotFoundError as exc:
            self._send(404, {"error": str(exc)})
        except ConflictError as exc:
            self._send(409, {"error": str(exc)})
        except PlanError as exc:
            self._send(400, {"error": "invalid plan", "errors": exc.errors})
        except (SchemaError, ValueError, KeyError, TypeError) as exc:
            self._send(400, {"error": str(exc)})
        except (BrokenPipeError, ConnectionResetError):
            pass

    def do_GET(self):
        self._dispatch("get")

    def do_POST(self):
        self._dispatch("post")

    # routes ----------------------------------------------------------------------
    def _post_schemas(self, rest, _q):
        if rest:
            raise NotFoundError("POST /schemas takes no path parameters")
        self._send(201, {"schema_id": self.core.register_schema(self._body())})

    def _get_schemas(self, rest, _q):
        if len(rest) != 1:
            with self.core.lock:
                self._send(200, [s.to_doc() for s in self.core.schemas.values()])
            return
        self._send(200, self.core.get_schema(rest[0]).to_doc())

    def _post_queries(self, rest, _q):
        if not rest:
            qid = self.core.register_query(self._body())
            self._send(201, {"query_id": qid, "state": self.core.get_query(qid)["state"]})
        elif len(rest) == 2 and rest[1] == "stop":
            self._send(200, self.core.stop_query(rest[0]))
        else:
            raise NotFoundError(f"no route POST /queries/{'/'.join(rest)}")

    def _get_queries(self, rest, _q):
        if not rest:
            self._send(200, self.core.list_queries())
        elif len(rest) == 1:
            self._send(200, self.core.get_query(rest[0]))
        else:
            raise NotFoundError("unknown query route")

    def _post_nodes(self, rest, _q):
        if rest == ["register"]:
            self._send(201, self.core.register_node(self._body()))
        elif len(rest) == 2 and rest[1] == "heartbeat":
            self._send(200, self.core.heartbeat(rest[0], self._body()))
        elif len(rest) == 2 and rest[1] == "deregister":
            self.core.deregister_node(rest[0])
            self._send(200, {"ok": True})
        else:
            raise NotFoundError("unknown node route")

    def _get_nodes(self, rest, _q):
        nodes = self.core.list_nodes()
        if rest:
            match = [n for n in nodes if n["node_id"] == rest[0]]
            if not match:
                raise NotFoundError(f"unknown node {rest[0]!r}")
            self._send(200, match[0])
        else:
            self._send(200, nodes)

    def _get_modules(self, rest, _q):
        if len(rest) != 1 or rest[0] not in self.core.modules:
            raise NotFoundError("unknown module")
        self._send(200, self.core.modules[rest[0]], "application/wasm")

    def _get_metadata(self, rest, _q):
        self._send(200, self.core.metadata())

    def _get_events(self, rest, query):
        if len(rest) != 1:
            raise NotFoundError("use /events/{nodeId}")
        node_id = rest[0]
        self.core._node(node_id)
        cmd_log = self.core.logs[node_id]
        raw = self.headers.get("Last-Event-ID") or (query.get("last_id") or ["0"])[0]
        last = int(raw or 0)
        if cmd_log.missed_beyond_horizon(last):
            log.info("node %s reconnected past the replay horizon; resyncing", node_id)
            last = cmd_log.last_id
            self.core.resync(node_id)
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Connection", "close")
        self.end_headers()
        self.close_connection = True
        self.wfile.write(b": connected\n\n")
        self.wfile.flush()
        stopping = self.server.stopping
        while not stopping.is_set():
            batch = cmd_log.wait(last, KEEPALIVE if not stopping.is_set() else 0)
            try:
                if not batch:
                    self.wfile.write(b": keep-alive\n\n")
                for cmd in batch:
                    self.wfile.write(sse_event(cmd))
                    last = cmd.command_id
                self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError, OSError):
                return


class CoordinatorServer:
    """Runs the HTTP server and the failure-detector ticker in background threads."""

    def __init__(self, config: CoordinatorConfig | None = None, coordinator: Coordinator | None = None):
        self.config = config or CoordinatorConfig()
        self.coordinator = coordinator or Coordinator(self.config)
        host, port = self.config.host_port
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.daemon_threads = True
        self.httpd.coordinator = self.coordinator
        self.httpd.stopping = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _tick_loop(self) -> None:
        period = self.config.heartbeat_interval / 4
        while not self.httpd.stopping.wait(period):
            try:
                self.coordinator.tick()
            except Exception:  # the detector must keep running
                log.exception("failure detector tick failed")

    def start(self) -> "CoordinatorServer":
        for target in (self.httpd.serve_forever, self._tick_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self.httpd.stopping.set()
        for cmd_log in self.coordinator.logs.values():
            with cmd_log.cond:
                cmd_log.cond.notify_all()
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(config: CoordinatorConfig) -> None:
    server = CoordinatorServer(config).start()
    log.info("coordinator listening on %s", server.url)
    try:
        server.httpd.stopping.wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
