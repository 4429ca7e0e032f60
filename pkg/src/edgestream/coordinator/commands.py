"""Per-node command logs with bounded replay."""
from __future__ import annotations

import threading
from collections import deque

from ..model import Command

REPLAY_BUFFER = 1024


class CommandLog:
    """Ordered commands for one node.

    Ids start at 1 and increase by one.  Only the newest ``capacity``
    commands are kept for replay.
    """

    def __init__(self, node_id: str, capacity: int = REPLAY_BUFFER):
        self.node_id = node_id
        self.capacity = capacity
        self._items: deque[Command] = deque(maxlen=capacity)
        self._next = 1
        self.cond = threading.Condition()

    @property
    def last_id(self) -> int:
        return self._next - 1

    @property
    def horizon(self) -> int:
        """Smallest command id still replayable (last_id + 1 when empty)."""
        return self._items[0].command_id if self._items else self._next

    def append(self, cmd: Command) -> Command:
        with self.cond:
            stamped = Command(cmd.target, cmd.kind, cmd.payload, self._next)
            self._next += 1
            self._items.append(stamped)
            self.cond.notify_all()
            return stamped

    def since(self, last_seen: int) -> list[Command]:
        with self.cond:
            return [c for c in self._items if c.command_id > last_seen]

    def missed_beyond_horizon(self, last_seen: int) -> bool:
        """True when commands after ``last_seen`` have already been evicted."""
        with self.cond:
            return last_seen + 1 < self.horizon

    def pending(self, acked_through: int) -> int:
        return max(0, self.last_id - acked_through)

    def wait(self, last_seen: int, timeout: float) -> list[Command]:
        with self.cond:
            if self.last_id <= last_seen:
                self.cond.wait(timeout)
            return [c for c in self._items if c.command_id > last_seen]
