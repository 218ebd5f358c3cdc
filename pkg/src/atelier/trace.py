"""Ordered event log of one task run, written as newline-delimited JSON."""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Any, Callable, Iterable

EVENTS = (
    "node-opened",
    "call-proposed",
    "call-executed",
    "evaluated",
    "feedback-recorded",
    "backtracked",
    "terminated",
    "warning",
)


class RunTrace:
    def __init__(self, clock: Callable[[], float] = time.time):
        self.clock = clock
        self.events: list[dict[str, Any]] = []

    def emit(self, event: str, node: int | None = None, **detail: Any) -> dict[str, Any]:
        if event not in EVENTS:
            raise ValueError(f"unknown trace event {event!r}")
        record = {"seq": len(self.events), "event": event, "node": node, "detail": detail, "ts": self.clock()}
        self.events.append(record)
        return record

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of(self, *events: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["event"] in events]

    def count(self, event: str) -> int:
        return sum(1 for e in self.events if e["event"] == event)

    def canonical(self) -> list[str]:
        """Event lines with timestamps dropped, for determinism comparisons."""
        return [json.dumps({k: v for k, v in e.items() if k != "ts"}, sort_keys=True, default=str) for e in self.events]

    def lines(self) -> Iterable[str]:
        for e in self.events:
            yield json.dumps(e, default=str)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")
        return path


def read_trace(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
