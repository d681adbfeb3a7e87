"""Timed events and traces shared by the hybrid engine and the tick oracle."""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .chains import Ticks


class EventKind(enum.Enum):
    ARRIVAL = "arrival"
    PREP_END = "prep_end"
    BUS_GRANT = "grant"
    SENSOR_TX_END = "sensor_tx_end"
    CONTROL_TX_END = "control_tx_end"
    DEADLINE_MISS = "deadline_miss"


@dataclass(frozen=True)
class TimedEvent:
    """One event in a trace.

    ``k`` is the 1-based instance index of the chain; ``sub`` distinguishes
    the sensor (1) and control (2) sub-message for PREP_END and BUS_GRANT and
    is 0 for the other kinds.
    """

    at: Ticks
    kind: EventKind
    chain: int
    k: int
    sub: int = 0

    def key(self) -> tuple:
        """Identity of the event independent of its time."""
        return (self.kind, self.chain, self.k, self.sub)

    def label(self) -> str:
        """CSV label; folds the sub-message index into the kind name."""
        if self.kind in (EventKind.PREP_END, EventKind.BUS_GRANT):
            base = "prep_end" if self.kind is EventKind.PREP_END else "grant"
            return f"{base}{self.sub}"
        return self.kind.value


EventTrace = list  # list[TimedEvent]; kept loose for speed in hot loops
