"""Event log and CSV trace dumps (CT, AT, micro-ops, events)."""

from __future__ import annotations

import csv
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

from arcane_sim.logging_config import get_logger

logger = get_logger(__name__)


@dataclass(slots=True, frozen=True)
class TraceEvent:
    cycle: int
    actor: str
    event: str
    detail: str = ""

    def to_row(self) -> tuple:
        return (self.cycle, self.actor, self.event, self.detail)


class EventLog:
    """Cycle-stamped record of simulator events.

    Events are always sent to the module logger at DEBUG; they are kept in
    memory only when ``enabled`` is set.
    """

    COLUMNS = ("cycle", "actor", "event", "detail")

    def __init__(self, enabled: bool = False):
        self.enabled = enabled
        self.events: list[TraceEvent] = []

    def record(self, cycle: int, actor: str, event: str, detail: str = "") -> None:
        if self.enabled:
            self.events.append(TraceEvent(cycle, actor, event, detail))
        logger.debug(f"{actor} {event} {detail}".rstrip(), extra={"cycle": cycle})

    def find(self, event: str, actor: str | None = None) -> list[TraceEvent]:
        return [e for e in self.events if e.event == event and (actor is None or e.actor == actor)]

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    return path
