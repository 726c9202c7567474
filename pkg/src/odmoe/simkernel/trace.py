"""Virtual-time event traces and their JSON-lines export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

from .engine import TICKS_PER_SECOND, to_seconds


class Kind(str, Enum):
    LoadStart = "LoadStart"
    LoadEnd = "LoadEnd"
    ComputeStart = "ComputeStart"
    ComputeEnd = "ComputeEnd"
    MainStart = "MainStart"
    MainEnd = "MainEnd"
    TransferStart = "TransferStart"
    TransferEnd = "TransferEnd"
    AlignStart = "AlignStart"
    AlignEnd = "AlignEnd"
    Stall = "Stall"
    Mispredict = "Mispredict"
    TokenEmitted = "TokenEmitted"
    Evict = "Evict"


# Tie order at equal times: interval ends before instants before interval starts.
KIND_ORDER = {
    k: i
    for i, k in enumerate(
        [
            Kind.LoadEnd,
            Kind.ComputeEnd,
            Kind.MainEnd,
            Kind.TransferEnd,
            Kind.AlignEnd,
            Kind.Evict,
            Kind.Mispredict,
            Kind.Stall,
            Kind.TokenEmitted,
            Kind.AlignStart,
            Kind.TransferStart,
            Kind.MainStart,
            Kind.LoadStart,
            Kind.ComputeStart,
        ]
    )
}

INTERVALS = {
    "Load": (Kind.LoadStart, Kind.LoadEnd),
    "Compute": (Kind.ComputeStart, Kind.ComputeEnd),
    "Main": (Kind.MainStart, Kind.MainEnd),
    "Transfer": (Kind.TransferStart, Kind.TransferEnd),
    "Align": (Kind.AlignStart, Kind.AlignEnd),
}


def subject_key(subject: str) -> tuple:
    name, _, num = subject.partition(":")
    return (name, int(num)) if num.isdigit() else (name, -1, num)


def format_seconds(ticks: int) -> str:
    """Exact decimal rendering of a tick count in seconds."""
    sign = "-" if ticks < 0 else ""
    whole, frac = divmod(abs(ticks), TICKS_PER_SECOND)
    return f"{sign}{whole}.{frac:012d}"


@dataclass(frozen=True)
class TraceEvent:
    time: int  # ticks
    kind: Kind
    subject: str
    payload: dict = field(default_factory=dict, compare=False, hash=False)
    seq: int = 0

    @property
    def seconds(self) -> float:
        return to_seconds(self.time)

    def sort_key(self):
        return (self.time, KIND_ORDER[self.kind], subject_key(self.subject), self.seq)

    def to_json(self) -> str:
        return json.dumps(
            {"time": format_seconds(self.time), "kind": self.kind.value, "subject": self.subject, "payload": self.payload},
            sort_keys=True,
        )


class EventTrace:
    """Ordered events plus per-token emission times and per-layer stalls."""

    def __init__(self):
        self._events: list[TraceEvent] = []
        self._sorted = True
        self.token_times: list[int] = []
        # (iteration, layer) -> stall ticks
        self.layer_stalls: dict[tuple[int, int], int] = {}
        self.warmup_layers: set[tuple[int, int]] = set()

    def emit(self, time: int, kind: Kind, subject: str, **payload) -> TraceEvent:
        ev = TraceEvent(time, kind, subject, payload, len(self._events))
        if self._events and ev.sort_key() < self._events[-1].sort_key():
            self._sorted = False
        self._events.append(ev)
        if kind is Kind.TokenEmitted:
            self.token_times.append(time)
        return ev

    @property
    def events(self) -> list[TraceEvent]:
        if not self._sorted:
            self._events.sort(key=TraceEvent.sort_key)
            self._sorted = True
        return self._events

    def __len__(self):
        return len(self._events)

    def of_kind(self, *kinds: Kind) -> list[TraceEvent]:
        return [e for e in self.events if e.kind in kinds]

    def total_stall_seconds(self) -> float:
        return to_seconds(sum(self.layer_stalls.values()))

    def stall_seconds(self, steady: bool | None = None) -> float:
        """Summed stall; ``steady=True`` excludes warm-up layers, False keeps only them."""
        total = 0
        for key, s in self.layer_stalls.items():
            if steady is None or (key in self.warmup_layers) != steady:
                total += s
        return to_seconds(total)

    def merge(self, other: "EventTrace") -> None:
        for ev in other.events:
            self.emit(ev.time, ev.kind, ev.subject, **ev.payload)
        self.layer_stalls.update(other.layer_stalls)
        self.warmup_layers |= other.warmup_layers

    def dump(self, limit: int | None = None) -> str:
        evs = self.events if limit is None else self.events[-limit:]
        return "\n".join(e.to_json() for e in evs)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for ev in self.events:
                fh.write(ev.to_json() + "\n")
