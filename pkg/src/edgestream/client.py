"""Small HTTP client for the coordinator API, including the SSE command stream."""
from __future__ import annotations

import http.client
import json
import socket
import urllib.error
import urllib.request
from urllib.parse import urlsplit

from .errors import ConflictError, NotFoundError, PlanError
from .model import Command


class CoordinatorError(Exception):
    pass


class CoordinatorClient:
    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def _call(self, method: str, path: str, doc=None, raw: bool = False):
        data = None if doc is None else json.dumps(doc).encode()
        req = urllib.request.Request(self.url + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            body = exc.read()
            try:
                err = json.loads(body)
            except ValueError:
                err = {"error": body.decode(errors="replace")}
            if exc.code == 404:
                raise NotFoundError(err.get("error", "not found")) from None
            if exc.code == 409:
                raise ConflictError(err.get("error", "conflict")) from None
            if exc.code == 400 and "errors" in err:
                raise PlanError(err["errors"]) from None
            raise CoordinatorError(f"{exc.code}: {err.get('error')}") from None
        return body if raw else json.loads(body)

    # schemas and queries
    def register_schema(self, doc: dict) -> int:
        return self._call("POST", "/schemas", doc)["schema_id"]

    def get_schema(self, schema_id) -> dict:
        return self._call("GET", f"/schemas/{schema_id}")

    def register_query(self, doc: dict) -> str:
        return self._call("POST", "/queries", doc)["query_id"]

    def get_query(self, query_id: str) -> dict:
        return self._call("GET", f"/queries/{query_id}")

    def list_queries(self) -> list:
        return self._call("GET", "/queries")

    def stop_query(self, query_id: str) -> dict:
        return self._call("POST", f"/queries/{query_id}/stop", {})

    # nodes
    def register_node(self, doc: dict) -> dict:
        return self._call("POST", "/nodes/register", doc)

    def heartbeat(self, node_id: str, doc: dict) -> dict:
        return self._call("POST", f"/nodes/{node_id}/heartbeat", doc)

    def deregister(self, node_id: str) -> None:
        self._call("POST", f"/nodes/{node_id}/deregister", {})

    def list_nodes(self) -> list:
        return self._call("GET", "/nodes")

    def fetch_module(self, module_id: str) -> bytes:
        return self._call("GET", f"/modules/{module_id}", raw=True)

    def metadata(self) -> dict:
        return self._call("GET", "/metadata")

    def events(self, node_id: str, last_id: int = 0, timeout: float = 30.0) -> "EventStream":
        return EventStream(self.url, node_id, last_id, timeout)


class EventStream:
    """Iterates Commands from ``GET /events/{nodeId}``.  Ends when the server closes."""

    def __init__(self, url: str, node_id: str, last_id: int, timeout: float):
        parts = urlsplit(url)
        self.conn = http.client.HTTPConnection(parts.hostname, parts.port, timeout=timeout)
        self.conn.request("GET", f"/events/{node_id}", headers={"Last-Event-ID": str(last_id),
                                                                "Accept": "text/event-stream"})
        self.resp = self.conn.getresponse()
        if self.resp.status == 404:
            self.close()
            raise NotFoundError(f"unknown node {node_id!r}")
        if self.resp.status != 200:
            self.close()
            raise CoordinatorError(f"event stream refused: {self.resp.status}")
        self.last_id = last_id

    def __iter__(self):
        fields: dict = {}
        data: list[str] = []
        while True:
            try:
                line = self.resp.readline()
            except (socket.timeout, OSError, ValueError, AttributeError):
                return
            if not line:
                return
            line = line.decode().rstrip("\r\n")
            if line == "":
                if data:
                    doc = json.loads("\n".join(data))
                    cmd = Command.from_doc(doc)
                    self.last_id = int(fields.get("id", cmd.command_id))
                    yield cmd
                fields, data = {}, []
                continue
            if line.startswith(":"):
                continue
            key, _, value = line.partition(":")
            value = value[1:] if value.startswith(" ") else value
            if key == "data":
                data.append(value)
            else:
                fields[key] = value

    def close(self) -> None:
        try:
            if self.conn.sock is not None:
                self.conn.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.conn.close()
