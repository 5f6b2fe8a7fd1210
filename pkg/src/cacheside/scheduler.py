"""Deterministic interleaving of actors over one shared MemorySystem.

An actor's behaviour is a generator (each ``next`` is one step) or a plain
callable invoked once per step.  The scheduler steps actors in weighted
round-robin order, or in seeded random order for stress runs.
"""
from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field

from .cache_model import CounterSample, MemorySystem
from .errors import ActorStepError, ConfigError, UnknownActorError

TRACE_FIELDS = ("cycle", "actor", "op", "addr", "latency")


@dataclass
class _Entry:
    actor: object
    step: object
    weight: int
    done: bool = False
    steps: int = 0


@dataclass
class RunSummary:
    clock: int
    steps: dict
    cycles: dict
    counters: dict = field(default_factory=dict)
    stopped_by: str = "exhausted"


class Scheduler:
    def __init__(self, system: MemorySystem, mode="round_robin", seed=0):
        if mode not in ("round_robin", "random"):
            raise ConfigError(f"unknown scheduling mode {mode!r}")
        self.system = system
        self.mode = mode
        self._rng = random.Random(seed)
        self._entries: list[_Entry] = []
        self._observers = []

    @property
    def clock(self):
        return self.system.current_time

    def add(self, actor, step, weight=1):
        """Attach a behaviour to an already registered actor."""
        self.system.actor(actor)
        if weight < 1 or int(weight) != weight:
            raise ConfigError("weights must be positive integers")
        if any(e.actor == actor for e in self._entries):
            raise ConfigError(f"actor {actor!r} already scheduled")
        self._entries.append(_Entry(actor, step, int(weight)))
        return self

    def observe(self, callback):
        """``callback(scheduler)`` runs after every step (used by monitors)."""
        self._observers.append(callback)
        return self

    def _step(self, entry):
        try:
            if callable(entry.step) and not hasattr(entry.step, "__next__"):
                entry.step()
            else:
                next(entry.step)
        except StopIteration:
            entry.done = True
            return False
        except Exception as exc:
            raise ActorStepError(entry.actor, self.clock, exc) from exc
        entry.steps += 1
        for cb in self._observers:
            cb(self)
        return True

    def _order(self):
        while True:
            live = [e for e in self._entries if not e.done]
            if not live:
                return
            if self.mode == "random":
                yield self._rng.choices(live, weights=[e.weight for e in live])[0]
            else:
                for e in live:
                    for _ in range(e.weight):
                        if e.done:
                            break
                        yield e

    def run(self, until=None, max_steps=None, stop=None, until_done=None) -> RunSummary:
        """Step actors until a stop condition holds.

        ``until``: clock limit in cycles; ``max_steps``: total step budget;
        ``stop``: zero-argument predicate checked after each step;
        ``until_done``: actors whose behaviours must all finish.
        """
        if not self._entries:
            raise ConfigError("nothing to schedule")
        waiting = None
        if until_done is not None:
            waiting = {a for a in until_done}
            known = {e.actor for e in self._entries}
            if waiting - known:
                raise UnknownActorError(sorted(map(str, waiting - known)))
        reason = "exhausted"
        total = 0
        for entry in self._order():
            if until is not None and self.clock >= until:
                reason = "time"
                break
            if max_steps is not None and total >= max_steps:
                reason = "steps"
                break
            stepped = self._step(entry)
            total += stepped
            if waiting is not None and entry.done:
                waiting.discard(entry.actor)
                if not waiting:
                    reason = "done"
                    break
            if stop is not None and stop():
                reason = "stop"
                break
        return self.summary(reason)

    def summary(self, reason="exhausted") -> RunSummary:
        counters = {e.actor: self.system.read_counters(e.actor) for e in self._entries}
        return RunSummary(
            clock=self.clock,
            steps={e.actor: e.steps for e in self._entries},
            cycles={a: c.cycles for a, c in counters.items()},
            counters=counters,
            stopped_by=reason,
        )


def trace_to_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for cycle, actor, op, addr, latency in trace:
        w.writerow((cycle, actor, op, "" if addr is None else addr, latency))
    return buf.getvalue()


def read_trace_csv(text):
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        addr = int(rec["addr"]) if rec["addr"] else None
        rows.append((int(rec["cycle"]), rec["actor"], rec["op"], addr, int(rec["latency"])))
    return rows


def replay(config, cores, trace) -> MemorySystem:
    """Re-execute a recorded trace on a fresh system.

    ``cores`` maps actor id to ``(core, itlb_events_per_step)`` or just core.
    Actor ids in ``trace`` are compared as strings so a trace read back from
    CSV replays against the original registration.
    """
    system = MemorySystem(config)
    by_name = {}
    for actor, placement in cores.items():
        core, itlb = placement if isinstance(placement, tuple) else (placement, 1)
        system.register(actor, core, itlb)
        by_name[str(actor)] = actor
    for _, actor, op, addr, latency in trace:
        actor = by_name.get(str(actor), actor)
        if op == "access":
            system.access(actor, addr)
        elif op == "flush":
            system.flush(actor, addr)
        elif op == "execute":
            system.execute(actor, latency)
        elif op == "idle":
            system.idle(actor, latency)
        else:
            raise ConfigError(f"unknown trace op {op!r}")
    return system


def total_counters(samples) -> CounterSample:
    out = CounterSample()
    for s in samples:
        out = out + s
    return out
