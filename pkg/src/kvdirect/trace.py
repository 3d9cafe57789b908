"""Append-only event log shared by workers and transfer sessions.

Events carry a global sequence number, so ordering questions ("did the ACK
for R1 arrive before the Complete write for R2 was posted?") are answered
without relying on timestamp ties.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    time_ns: int
    kind: str
    source: str
    request_ids: tuple[int, ...]
    detail: dict[str, Any] = field(default_factory=dict, compare=False)


class EventLog:
    def __init__(self) -> None:
        self.events: list[TraceEvent] = []
        self._seq = itertools.count()

    def record(self, time_ns: int, kind: str, source: str, request_ids: Iterable[int] = (),
               **detail: Any) -> TraceEvent:
        ev = TraceEvent(next(self._seq), time_ns, kind, source, tuple(request_ids), detail)
        self.events.append(ev)
        return ev

    def of_kind(self, *kinds: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind in kinds]

    def by_request(self) -> dict[int, list[TraceEvent]]:
        out: dict[int, list[TraceEvent]] = defaultdict(list)
        for e in self.events:
            for rid in e.request_ids:
                out[rid].append(e)
        return out

    def __len__(self) -> int:
        return len(self.events)
