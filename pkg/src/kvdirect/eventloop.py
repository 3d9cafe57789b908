"""Deterministic virtual-time event loop.

Exposes the slice of the asyncio loop API the rest of the package relies on
(``time``, ``call_soon``, ``call_later``, ``call_at``), so the same worker and
transport code runs unchanged on a real asyncio loop over sockets. Time is
kept internally as integer nanoseconds; ties run in scheduling order.
"""

from __future__ import annotations

import asyncio
import heapq
import itertools
import time as _time
from typing import Any, Callable

NS = 1_000_000_000


def to_ns(seconds: float) -> int:
    return round(seconds * NS)


class Handle:
    __slots__ = ("callback", "args", "cancelled", "when_ns")

    def __init__(self, when_ns: int, callback: Callable, args: tuple):
        self.when_ns = when_ns
        self.callback = callback
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def when(self) -> float:
        return self.when_ns / NS


class SimulationStalled(RuntimeError):
    pass


class VirtualLoop:
    def __init__(self) -> None:
        self._now = 0
        self._queue: list[tuple[int, int, Handle]] = []
        self._seq = itertools.count()
        self.events_run = 0

    def time(self) -> float:
        return self._now / NS

    def time_ns(self) -> int:
        return self._now

    def call_at(self, when: float, callback: Callable, *args: Any) -> Handle:
        return self._push(max(self._now, to_ns(when)), callback, args)

    def call_at_ns(self, when_ns: int, callback: Callable, *args: Any) -> Handle:
        return self._push(max(self._now, when_ns), callback, args)

    def call_later(self, delay: float, callback: Callable, *args: Any) -> Handle:
        if delay < 0:
            raise ValueError("negative delay")
        return self._push(self._now + to_ns(delay), callback, args)

    def call_soon(self, callback: Callable, *args: Any) -> Handle:
        return self._push(self._now, callback, args)

    call_soon_threadsafe = call_soon

    def _push(self, when_ns: int, callback: Callable, args: tuple) -> Handle:
        handle = Handle(when_ns, callback, args)
        heapq.heappush(self._queue, (when_ns, next(self._seq), handle))
        return handle

    def pending(self) -> int:
        return sum(1 for _, _, h in self._queue if not h.cancelled)

    def step(self) -> bool:
        while self._queue:
            when, _, handle = heapq.heappop(self._queue)
            if handle.cancelled:
                continue
            self._now = when
            self.events_run += 1
            handle.callback(*handle.args)
            return True
        return False

    def run(self, until: float | None = None, max_events: int | None = None) -> None:
        """Run until the queue drains, virtual time passes ``until`` or the budget ends."""
        limit = None if until is None else to_ns(until)
        budget = max_events
        while self._queue:
            if self._queue[0][2].cancelled:
                heapq.heappop(self._queue)
                continue
            if limit is not None and self._queue[0][0] > limit:
                self._now = max(self._now, limit)
                return
            if not self.step():
                return
            if budget is not None:
                budget -= 1
                if budget <= 0:
                    return
        if limit is not None:
            self._now = max(self._now, limit)

    def run_until(self, predicate: Callable[[], bool], timeout: float | None = None) -> bool:
        """Run events until ``predicate()`` holds; False if the queue empties or time runs out."""
        deadline = None if timeout is None else self._now + to_ns(timeout)
        while not predicate():
            while self._queue and self._queue[0][2].cancelled:
                heapq.heappop(self._queue)
            if not self._queue:
                return False
            if deadline is not None and self._queue[0][0] > deadline:
                return False
            self.step()
        return True


def drive(loop, predicate: Callable[[], bool], timeout: float = 10.0) -> bool:
    """Advance either loop kind until ``predicate()`` holds or ``timeout`` elapses.

    ``timeout`` is virtual seconds on a VirtualLoop and wall seconds on asyncio.
    """
    if isinstance(loop, VirtualLoop):
        return loop.run_until(predicate, timeout)

    async def waiter() -> bool:
        deadline = _time.monotonic() + timeout
        while not predicate():
            if _time.monotonic() > deadline:
                return False
            await asyncio.sleep(0.0005)
        return True

    return loop.run_until_complete(waiter())


def now_ns(loop) -> int:
    """Current loop time in integer nanoseconds, for either loop kind."""
    get = getattr(loop, "time_ns", None)
    if get is not None:
        return get()
    return round(loop.time() * NS)
