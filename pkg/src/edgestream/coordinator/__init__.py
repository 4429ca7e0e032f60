"""The coordinator: schema registry, query manager, node registry and command channel."""
from .commands import CommandLog
from .config import CoordinatorConfig, load_config
from .core import Coordinator, QueryRecord, QueryState, history_is_valid
from .server import CoordinatorServer, serve

__all__ = [
    "CommandLog", "Coordinator", "CoordinatorConfig", "CoordinatorServer", "QueryRecord", "QueryState",
    "history_is_valid", "load_config", "serve",
]
