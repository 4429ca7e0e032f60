"""Coordinator settings: defaults, then a JSON file, then environment variables."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

ENV = {
    "listen": "EDGESTREAM_LISTEN",
    "heartbeat_interval": "EDGESTREAM_HEARTBEAT_INTERVAL",
    "failure_threshold": "EDGESTREAM_FAILURE_THRESHOLD",
    "activation_threshold": "EDGESTREAM_ACTIVATION_THRESHOLD",
    "replay_buffer": "EDGESTREAM_REPLAY_BUFFER",
}


@dataclass
class CoordinatorConfig:
    listen: str = "127.0.0.1:8080"
    heartbeat_interval: float = 1.0
    failure_threshold: int = 3
    activation_threshold: int = 2
    replay_buffer: int = 1024
    alpha: float = 0.1

    def __post_init__(self):
        if self.heartbeat_interval <= 0:
            raise ValueError("heartbeat_interval must be positive")
        if self.failure_threshold < 1 or self.replay_buffer < 1 or self.activation_threshold < 1:
            raise ValueError("thresholds and buffer sizes must be at least 1")

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)

    def to_doc(self) -> dict:
        return asdict(self)


def _coerce(name: str, raw):
    typ = {f.name: f.type for f in fields(CoordinatorConfig)}[name]
    if raw is None:
        return None
    if typ in ("float", float):
        return float(raw)
    if typ in ("int", int):
        return int(raw)
    return str(raw)


def load_config(path: str | None = None, env=None, **overrides) -> CoordinatorConfig:
    env = os.environ if env is None else env
    values: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {f.name for f in fields(CoordinatorConfig)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        values.update(doc)
    for name, var in ENV.items():
        if var in env and env[var] != "":
            values[name] = env[var]
    values.update({k: v for k, v in overrides.items() if v is not None})
    return CoordinatorConfig(**{k: _coerce(k, v) for k, v in values.items()})
