"""Token-bucket pacing for rate-controlled emission."""
from __future__ import annotations

import time

# deficits below this are rounding noise; waiting them out could spin forever
EPS = 1e-9


class TokenBucket:
    """Continuous refill at ``rate`` tokens/s, capacity ``rate``, starting empty."""

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.capacity = float(capacity if capacity is not None else rate)
        self.clock = clock
        self.sleep = sleep
        self.tokens = 0.0
        self.stamp = clock()

    def _refill(self) -> None:
        now = self.clock()
        self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
        self.stamp = now

    def take(self) -> None:
        """Block until one token is available, then consume it."""
        self._refill()
        while self.tokens < 1.0 - EPS:
            self.sleep((1.0 - self.tokens) / self.rate)
            self._refill()
        self.tokens = max(0.0, self.tokens - 1.0)


def tuple_budget(rate: float, duration: float | None = None, count: int | None = None) -> int | None:
    """How many tuples a run emits: an explicit count, or rate x duration."""
    if count is not None:
        return int(count)
    if duration is not None:
        return int(round(rate * duration))
    return None
