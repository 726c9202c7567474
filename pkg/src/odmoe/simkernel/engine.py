"""A minimal generator-based discrete-event engine.

Processes are generators that yield events; a process resumes when the
event it yielded has fired.  Virtual time is an integer tick count, so
schedules are exact and independent of float summation order.  Events
firing at the same tick are processed in scheduling order, which makes a
run a pure function of its inputs.
"""

from __future__ import annotations

import heapq
import itertools
from typing import Callable, Generator, Iterable

TICKS_PER_SECOND = 10**12


def to_ticks(seconds: float) -> int:
    return round(seconds * TICKS_PER_SECOND)


def to_seconds(ticks: int) -> float:
    return ticks / TICKS_PER_SECOND


class Event:
    __slots__ = ("env", "callbacks", "triggered", "value", "time", "name")

    def __init__(self, env: "Environment", name: str = ""):
        self.env = env
        self.callbacks: list[Callable] = []
        self.triggered = False
        self.value = None
        self.time: int | None = None
        self.name = name

    def succeed(self, value=None) -> "Event":
        if self.triggered:
            raise RuntimeError(f"event {self.name or self!r} fired twice")
        self.triggered = True
        self.value = value
        self.time = self.env.now
        callbacks, self.callbacks = self.callbacks, []
        for cb in callbacks:
            self.env._schedule(self.env.now, cb, self)
        return self

    def __repr__(self):
        state = f"fired@{self.time}" if self.triggered else "pending"
        return f"<Event {self.name} {state}>"


class Process(Event):
    """Runs a generator; fires with its return value when it finishes."""

    __slots__ = ("gen", "waiting_on")

    def __init__(self, env: "Environment", gen: Generator, name: str = ""):
        super().__init__(env, name)
        self.gen = gen
        self.waiting_on: Event | None = None
        env._schedule(env.now, self._resume, None)

    def _resume(self, event: Event | None):
        value = event.value if event is not None else None
        while True:
            try:
                target = self.gen.send(value)
            except StopIteration as stop:
                self.waiting_on = None
                self.succeed(stop.value)
                return
            if not isinstance(target, Event):
                raise TypeError(f"process {self.name} yielded {target!r}, expected an Event")
            if target.triggered:
                value = target.value
                continue
            self.waiting_on = target
            target.callbacks.append(self._resume)
            return


class Environment:
    def __init__(self, start: int = 0):
        self.now = start
        self._queue: list = []
        self._seq = itertools.count()
        self.processes: list[Process] = []

    def _schedule(self, time: int, fn: Callable, arg) -> None:
        heapq.heappush(self._queue, (time, next(self._seq), fn, arg))

    def event(self, name: str = "") -> Event:
        return Event(self, name)

    def timeout(self, delay: int, value=None) -> Event:
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        ev = Event(self, f"timeout+{delay}")
        self._schedule(self.now + delay, lambda _arg: ev.succeed(value), None)
        return ev

    def until(self, time: int) -> Event:
        return self.timeout(max(0, time - self.now))

    def any_of(self, events: Iterable[Event]) -> Event:
        """Fires with the first of ``events`` to fire."""
        events = list(events)
        out = Event(self, "any_of")
        for ev in events:
            if ev.triggered:
                return out.succeed(ev)

        def fire(ev):
            if not out.triggered:
                out.succeed(ev)

        for ev in events:
            ev.callbacks.append(fire)
        return out

    def all_of(self, events: Iterable[Event]) -> Event:
        events = [ev for ev in events if not ev.triggered]
        out = Event(self, "all_of")
        if not events:
            return out.succeed()
        remaining = [len(events)]

        def fire(_ev):
            remaining[0] -= 1
            if remaining[0] == 0:
                out.succeed()

        for ev in events:
            ev.callbacks.append(fire)
        return out

    def process(self, gen: Generator, name: str = "") -> Process:
        proc = Process(self, gen, name)
        self.processes.append(proc)
        return proc

    def run(self) -> None:
        """Run until no events remain."""
        while self._queue:
            time, _, fn, arg = heapq.heappop(self._queue)
            self.now = time
            fn(arg)

    def blocked(self) -> list[Process]:
        return [p for p in self.processes if not p.triggered]
