"""Scripted victims: a T-table AES encryptor, a keystroke handler and a few
synthetic benign workloads used to calibrate the detector."""
from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field

ENTRY_SIZE = 4
ENTRIES_PER_TABLE = 256
TABLE_BASE = 0x6000_0000
LIB_BASE = 0x7000_0000
CYCLES_PER_MS = 1000
EXTRA_ROUND_ACCESSES = 36


def aes_first_round_lines(p, k, line_size=64):
    """(table, line) touched by the first round: T_{i mod 4}[p_i ^ k_i]."""
    per_line = line_size // ENTRY_SIZE
    if len(p) != 16 or len(k) != 16:
        raise ValueError("plaintext and key must be 16 bytes")
    return [(i % 4, (p[i] ^ k[i]) // per_line) for i in range(16)]


def parse_key(text) -> bytes:
    key = bytes.fromhex(text.strip().removeprefix("0x"))
    if len(key) != 16:
        raise ValueError("AES-128 keys are 16 bytes (32 hex digits)")
    return key


class AesTTableVictim:
    """Emulates the cache footprint of a T-table AES encryption.

    The first round accesses the real T-table indices; rounds 2-10 are
    replaced by 36 uniformly random table accesses drawn from a generator
    seeded by (key, plaintext), so the same plaintext always produces the
    same footprint.
    """

    def __init__(self, key, table_base=TABLE_BASE, full_rounds=True, line_size=64, actor="victim"):
        self.key = bytes(key)
        if len(self.key) != 16:
            raise ValueError("AES-128 keys are 16 bytes")
        if table_base % line_size:
            raise ValueError("T-tables must be line aligned")
        self.table_base = table_base
        self.full_rounds = full_rounds
        self.line_size = line_size
        self.entries_per_line = line_size // ENTRY_SIZE
        self.actor = actor
        self.encryptions = 0

    @property
    def table_size(self):
        return ENTRIES_PER_TABLE * ENTRY_SIZE

    def table_addr(self, table, entry=0):
        return self.table_base + table * self.table_size + entry * ENTRY_SIZE

    def line_addr(self, table, line):
        return self.table_addr(table, line * self.entries_per_line)

    def accessed_addresses(self, p):
        p = bytes(p)
        addrs = [self.table_addr(i % 4, p[i] ^ self.key[i]) for i in range(16)]
        if self.full_rounds:
            rng = random.Random(self.key + p)
            addrs += [self.table_addr(rng.randrange(4), rng.randrange(ENTRIES_PER_TABLE))
                      for _ in range(EXTRA_ROUND_ACCESSES)]
        return addrs

    def encrypt(self, p, system):
        for addr in self.accessed_addresses(p):
            system.access(self.actor, addr)
        self.encryptions += 1


@dataclass
class KeystrokeVictim:
    """Touches ``hot_addresses`` at each scheduled keystroke, plus independent
    Poisson "noise" touches of each hot address (other library activity)."""

    hot_addresses: tuple
    schedule: tuple
    noise_rate: float = 0.0
    seed: int = 0
    actor: object = "victim"
    quantum: int = 1000
    ground_truth: list = field(default_factory=list)
    noise_events: list = field(default_factory=list)

    def __post_init__(self):
        self.hot_addresses = tuple(self.hot_addresses)
        self.schedule = tuple(int(t) for t in self.schedule)
        if not 1 <= len(self.hot_addresses) <= 3:
            raise ValueError("a keystroke victim touches 1 to 3 hot addresses")
        if any(b <= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError("keystroke schedule must be strictly increasing")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be >= 0")

    @classmethod
    def scripted(cls, n_events, hot_addresses=None, seed=0, gap_ms=(80, 300), start=10_000, **kw):
        rng = random.Random(seed)
        t, times = start, []
        for _ in range(n_events):
            times.append(t)
            t += rng.randint(gap_ms[0] * CYCLES_PER_MS, gap_ms[1] * CYCLES_PER_MS)
        if hot_addresses is None:
            hot_addresses = default_hot_addresses(3)
        return cls(tuple(hot_addresses), tuple(times), seed=seed, **kw)

    @property
    def duration(self):
        return (self.schedule[-1] if self.schedule else 0) + 300 * CYCLES_PER_MS

    def steps(self, system, duration=None):
        """Generator for the scheduler: one step per event or idle quantum."""
        duration = self.duration if duration is None else duration
        rng = random.Random(self.seed ^ 0x5EED)
        noise = []
        for addr in self.hot_addresses:
            t = system.current_time
            while self.noise_rate > 0:
                t += rng.expovariate(self.noise_rate)
                if t >= duration:
                    break
                noise.append((int(t), addr))
        noise.sort()
        pending = [(t, None) for t in self.schedule if t < duration] + noise
        pending.sort(key=lambda e: (e[0], e[1] is not None, e[1] or 0))
        i = 0
        while system.current_time < duration:
            now = system.current_time
            if i < len(pending) and pending[i][0] <= now:
                _, addr = pending[i]
                i += 1
                if addr is None:
                    self.ground_truth.append(now)
                    for a in self.hot_addresses:
                        system.access(self.actor, a)
                else:
                    self.noise_events.append(now)
                    system.access(self.actor, addr)
            else:
                nxt = pending[i][0] if i < len(pending) else duration
                system.idle(self.actor, max(1, min(nxt - now, self.quantum)))
            yield


def run_keystrokes(victim: KeystrokeVictim, system, duration=None):
    """Drive the victim alone until ``duration``; returns the ground truth."""
    for _ in victim.steps(system, duration):
        pass
    return list(victim.ground_truth)


def default_hot_addresses(n, base=LIB_BASE, page_size=4096, line_size=64):
    # one hot line per page, on distinct sets, so every technique can watch them
    return tuple(base + i * (page_size + 3 * line_size) for i in range(n))


def read_schedule_csv(text):
    rows = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    return tuple(int(r["time_cycles"]) for r in rows)


def write_schedule_csv(fh, schedule):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("time_cycles",))
    for t in schedule:
        w.writerow((t,))


# ---------------------------------------------------------------- workloads
WORKLOAD_BASE = 0x8000_0000 >> 1


def idle_workload(system, actor, quantum=1000):
    while True:
        system.idle(actor, quantum)
        yield


def streaming_workload(system, actor, size=16 << 20, stride=8, base=WORKLOAD_BASE):
    """Sequential sweep over a large array."""
    off = 0
    while True:
        system.access(actor, base + off)
        off = (off + stride) % size
        yield


def compute_workload(system, actor, burst=4):
    """Instruction-only work, no memory traffic."""
    while True:
        system.execute(actor, burst)
        yield


def interactive_workload(system, actor, working_set=512 << 10, seed=0, base=WORKLOAD_BASE + (64 << 20)):
    """Random accesses over a moderately sized working set."""
    rng = random.Random(seed)
    lines = working_set // system.config.line_size
    while True:
        system.access(actor, base + rng.randrange(lines) * system.config.line_size)
        yield


#: name -> (factory, itlb_events_per_step)
WORKLOADS = {
    "idle": (idle_workload, 1),
    "streaming": (streaming_workload, 4),
    "compute": (compute_workload, 1),
    "interactive": (interactive_workload, 2),
}


def run_workload(system, actor, name, steps, warmup=0):
    """Run ``warmup`` then ``steps`` steps of a workload; return the counter
    delta over the measured part."""
    factory = WORKLOADS[name][0]
    gen = factory(system, actor)
    for _ in range(warmup):
        next(gen)
    before = system.read_counters(actor)
    for _ in range(steps):
        next(gen)
    return system.read_counters(actor) - before
