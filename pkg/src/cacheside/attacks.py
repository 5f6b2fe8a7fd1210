"""End-to-end attacks: AES upper-nibble recovery, keystroke spying, slice
mapping, plus the workload battery that recalibrates the detector."""
from __future__ import annotations

import csv
import random
from collections import Counter
from dataclasses import dataclass, field

from .cache_model import CounterSample, MemorySystem
from .detector import DetectorConfig, calibrate_thresholds, classify
from .errors import ConfigError, MappingError
from .probes import (
    MemoryRegion,
    SimulatedBackend,
    Technique,
    build_eviction_set,
    calibrate,
    calibrate_pp,
    ff_probe,
    fr_probe,
    pp_prime,
    pp_probe,
)
from .scheduler import Scheduler
from .victims import WORKLOADS, run_workload

ATTACKER_REGION = MemoryRegion(0x3000_0000, 0x1000_0000)
KEYSTROKE_WAIT = 5000


@dataclass
class AttackReport:
    technique: str
    kind: str
    success: bool
    recovered: object = None
    encryptions_used: int = 0
    probes_used: int = 0
    margin: float = 0.0
    counters: CounterSample = field(default_factory=CounterSample)
    details: dict = field(default_factory=dict)

    def summary(self):
        out = {
            "kind": self.kind,
            "technique": self.technique,
            "success": self.success,
            "encryptions_used": self.encryptions_used,
            "probes_used": self.probes_used,
            "margin": round(self.margin, 6),
            "attacker_refs": self.counters.cache_references,
            "attacker_misses": self.counters.cache_misses,
            "attacker_itlb": self.counters.itlb_ra + self.counters.itlb_wa,
        }
        out.update(self.details)
        return out


class Spy:
    """A probing attacker: one backend, one technique, a set of watched lines.

    Thresholds are calibrated on a scratch copy of the memory system so the
    attacker's counters only reflect the attack itself.
    """

    def __init__(self, technique, system, actor, lines, helper_core=0, threshold=None):
        self.tech = Technique.parse(technique)
        self.system = system
        self.backend = SimulatedBackend(system, actor)
        self.lines = list(lines)
        self.sets = {}
        if self.tech is Technique.PP:
            used = {a // system.config.page_size for a in self.lines}
            for line in self.lines:
                es = build_eviction_set(system, line, ATTACKER_REGION, used)
                used.update(m // system.config.page_size for m in es)
                self.sets[line] = es
        self.threshold = threshold or self._calibrate(helper_core)
        self.probes = 0

    def _calibrate(self, helper_core):
        cfg = self.system.config
        scratch = MemorySystem(cfg.replace(seed=(cfg.seed + 0xCA11) % 2**64))
        scratch.register("prober", self.backend.core)
        scratch.register("helper", helper_core)
        prober = SimulatedBackend(scratch, "prober")
        helper = SimulatedBackend(scratch, "helper")
        line = self.lines[0]
        if self.tech is Technique.PP:
            return calibrate_pp(prober, self.sets[line], 200, helper=helper, victim_addr=line)
        return calibrate(prober, line, 200, self.tech.value, helper=helper)

    def reset(self):
        for line in self.lines:
            if self.tech is Technique.PP:
                pp_prime(self.backend, self.sets[line])
            else:
                self.backend.plain_flush(line)

    def probe(self, line) -> bool:
        self.probes += 1
        if self.tech is Technique.FF:
            return ff_probe(self.backend, line, self.threshold).active
        if self.tech is Technique.FR:
            return fr_probe(self.backend, line, self.threshold).active
        return pp_probe(self.backend, self.sets[line], self.threshold).active


def _ensure_actor(system, actor, core):
    if actor not in system.actors:
        system.register(actor, core)


def stop_rule(scores, margin):
    """Best and runner-up scores plus whether the best leads by ``margin``."""
    ranked = sorted(range(len(scores)), key=lambda c: (-scores[c], c))
    best, second = scores[ranked[0]], scores[ranked[1]]
    done = best > second and best >= (1 + margin) * second
    return ranked[0], best, second, done


def recover_upper_nibbles(technique, victim, system, margin=0.05, lines=1, budget=100_000,
                          seed=0, attacker="attacker", attacker_core=1, victim_core=0, observers=()) -> AttackReport:
    """Chosen-plaintext first-round attack on the T-table AES victim.

    For each key byte ``i`` the attacker sweeps the 16 upper nibbles of
    ``p_i`` (other bytes random), probes the first ``lines`` lines of table
    ``i mod 4`` after every encryption and credits key nibble ``c ^ l`` when
    line ``l`` is hit.  A byte is decided once the leading nibble's score is
    at least ``(1 + margin)`` times the runner-up's.
    """
    tech = Technique.parse(technique)
    if lines < 1 or lines > 16:
        raise ConfigError("lines must be in 1..16")
    if lines > 1 and tech is not Technique.FF:
        raise ConfigError("monitoring several lines of one page is only prefetcher-safe with Flush+Flush")
    _ensure_actor(system, victim.actor, victim_core)
    _ensure_actor(system, attacker, attacker_core)
    watched = [victim.line_addr(t, l) for t in range(4) for l in range(lines)]
    spy = Spy(tech, system, attacker, watched, helper_core=victim_core)
    spy.reset()
    start = system.read_counters(attacker)
    state = {"plaintext": None}

    def victim_steps():
        while True:
            if state["plaintext"] is not None:
                victim.encrypt(state["plaintext"], system)
                state["plaintext"] = None
            yield

    nibbles, margins, per_byte, scores_all = [], [], [], []
    used = 0
    inconclusive = False

    def attacker_steps():
        nonlocal used, inconclusive
        for i in range(16):
            rng = random.Random(f"{seed}:{i}")
            table = i % 4
            scores = [0] * 16
            count = 0
            while True:
                for c in range(16):
                    p = bytearray(rng.randbytes(16))
                    p[i] = (c << 4) | rng.randrange(16)
                    state["plaintext"] = bytes(p)
                    yield
                    count += 1
                    for l in range(lines):
                        if spy.probe(victim.line_addr(table, l)):
                            scores[c ^ l] += 1
                best_c, best, second, done = stop_rule(scores, margin)
                if done or count >= budget:
                    break
            used += count
            per_byte.append(count)
            scores_all.append(scores)
            nibbles.append(best_c)
            margins.append((best - second) / max(second, 1))
            if not done:
                inconclusive = True
                return

    sched = Scheduler(system)
    sched.add(attacker, attacker_steps())
    sched.add(victim.actor, victim_steps())
    for ob in observers:
        sched.observe(ob)
    sched.run(until_done=[attacker])
    truth = [b >> 4 for b in victim.key]
    success = not inconclusive and nibbles == truth
    return AttackReport(
        tech.value, "aes", success, nibbles, encryptions_used=used, probes_used=spy.probes,
        margin=min(margins) if margins else 0.0,
        counters=system.read_counters(attacker) - start,
        details={"lines": lines, "per_byte": per_byte, "inconclusive": inconclusive,
                 "recovered_hex": "".join(f"{n:x}" for n in nibbles), "scores": scores_all},
    )


def cache_template(technique, victim, system, encryptions_per_candidate=100, key_byte=0, seed=0,
                   attacker="attacker", attacker_core=1, victim_core=0):
    """Hit counts for every (upper nibble of p_i, line of table i mod 4)."""
    tech = Technique.parse(technique)
    _ensure_actor(system, victim.actor, victim_core)
    _ensure_actor(system, attacker, attacker_core)
    table = key_byte % 4
    watched = [victim.line_addr(table, l) for l in range(16)]
    spy = Spy(tech, system, attacker, watched, helper_core=victim_core)
    spy.reset()
    rng = random.Random(f"template:{seed}")
    matrix = [[0] * 16 for _ in range(16)]
    for c in range(16):
        for _ in range(encryptions_per_candidate):
            p = bytearray(rng.randbytes(16))
            p[key_byte] = (c << 4) | rng.randrange(16)
            victim.encrypt(bytes(p), system)
            for l, line in enumerate(watched):
                matrix[c][l] += spy.probe(line)
    return matrix


def write_template_csv(fh, matrix):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["candidate"] + [f"line{l}" for l in range(len(matrix[0]))])
    for c, row in enumerate(matrix):
        w.writerow([f"{c:x}"] + row)


# ---------------------------------------------------------------- keystrokes
def score_events(truth, reports, window):
    """Greedy in-order matching of reports to ground-truth events.

    Returns (matched, false_positives, accuracy) with accuracy =
    max(0, matched - false_positives) / len(truth).
    """
    matched, j = 0, 0
    used = [False] * len(reports)
    for t in truth:
        while j < len(reports) and reports[j] < t:
            j += 1
        if j < len(reports) and reports[j] - t <= window:
            used[j] = True
            matched += 1
            j += 1
    fps = used.count(False)
    acc = max(0, matched - fps) / len(truth) if truth else 0.0
    return matched, fps, acc


def spy_keystrokes(technique, addrs, system, victim, duration=None, wait=KEYSTROKE_WAIT,
                   attacker="attacker", attacker_core=1, victim_core=0, observers=()) -> AttackReport:
    """Probe ``addrs`` in a loop; report a keystroke when a majority of them
    are active in one round (debounced by one round)."""
    tech = Technique.parse(technique)
    addrs = list(addrs)
    if not 1 <= len(addrs) <= 3:
        raise ConfigError("spy on 1 to 3 addresses")
    duration = victim.duration if duration is None else duration
    _ensure_actor(system, victim.actor, victim_core)
    _ensure_actor(system, attacker, attacker_core)
    spy = Spy(tech, system, attacker, addrs, helper_core=victim_core)
    spy.reset()
    start = system.read_counters(attacker)
    reports, round_starts = [], []

    def attacker_steps():
        prev = False
        while True:
            round_starts.append(system.current_time)
            votes = sum(spy.probe(a) for a in addrs)
            active = 2 * votes > len(addrs)
            if active and not prev:
                reports.append(system.current_time)
            prev = active
            spy.backend.wait(wait)
            yield

    sched = Scheduler(system)
    sched.add(attacker, attacker_steps())
    sched.add(victim.actor, victim.steps(system, duration))
    for ob in observers:
        sched.observe(ob)
    sched.run(until_done=[victim.actor])
    gaps = [b - a for a, b in zip(round_starts, round_starts[1:])]
    window = max(gaps) if gaps else wait
    truth = list(victim.ground_truth)
    matched, fps, acc = score_events(truth, reports, window)
    return AttackReport(
        tech.value, "keystroke", acc > 0, reports, probes_used=spy.probes, margin=acc,
        counters=system.read_counters(attacker) - start,
        details={"events": len(truth), "matched": matched, "false_positives": fps,
                 "accuracy": acc, "addresses": len(addrs), "window": window},
    )


# -------------------------------------------------------------- slice mapping
def map_slices(backends, addrs, reps=1, helper=None):
    """Map each address to the core whose flush of the cached line is
    fastest (the line's local slice), by majority over ``reps`` rounds.

    ``backends`` is one probe backend per core, indexed by core.
    """
    backends = list(backends)
    helper = helper or backends[0]
    out = {}
    for addr in addrs:
        votes = Counter()
        for _ in range(reps):
            lat = []
            for b in backends:
                helper.plain_access(addr)
                b.serialize()
                lat.append(b.timed_flush(addr))
            low = min(lat)
            if lat.count(low) == 1:
                votes[lat.index(low)] += 1
        core, n = votes.most_common(1)[0] if votes else (None, 0)
        if 2 * n <= reps:
            raise MappingError(f"flush timings for {addr:#x} do not single out one core")
        out[addr] = core
    return out


def slice_map_system(system, addrs, reps=1):
    """Run ``map_slices`` with one prober per core of a simulated system."""
    n = system.config.n_cores
    for c in range(n):
        _ensure_actor(system, f"core{c}", c)
    backends = [SimulatedBackend(system, f"core{c}") for c in range(n)]
    cores = map_slices(backends, addrs, reps)
    return {a: system.local_slice(c) for a, c in cores.items()}


def write_slice_csv(fh, mapping):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("addr", "slice"))
    for a, s in mapping.items():
        w.writerow((f"{a:#x}", s))


# -------------------------------------------------------- detector battery
def _spy_loop(system, technique, steps, seed):
    """Reference attack loop: probe one line while a victim touches it in a
    random half of the rounds."""
    system.register("spy", 1)
    system.register("target", 0)
    rng = random.Random(seed)
    line = 0x5000_0000
    spy = Spy(technique, system, "spy", [line])
    spy.reset()
    start = system.read_counters("spy")
    for _ in range(steps):
        if rng.random() < 0.5:
            system.access("target", line)
        spy.probe(line)
    return system.read_counters("spy") - start


def _hammer_loop(system, steps):
    system.register("spy", 1)
    line = 0x5000_0000
    for _ in range(steps):
        system.access("spy", line)
        system.flush("spy", line)
    return system.read_counters("spy")


def detector_battery(config, steps=20_000, seed=0):
    """Counter samples of synthetic benign workloads and reference attack
    loops (a Flush+Reload spy and a flush/access hammer loop), each run alone
    on a fresh system.  Other attacks are left out so they can be tested
    against thresholds they did not influence."""
    benign = {}
    for name, (_, itlb) in WORKLOADS.items():
        if name == "idle":
            continue  # no ITLB events: indeterminate, not a calibration point
        system = MemorySystem(config)
        system.register(name, 0, itlb)
        benign[name] = run_workload(system, name, name, steps, warmup=steps)
    malicious = {
        "fr_spy": _spy_loop(MemorySystem(config), "fr", steps, seed),
        "hammer": _hammer_loop(MemorySystem(config), steps // 2),
    }
    return benign, malicious


def calibrated_detector(config, steps=20_000, seed=0, sampling_interval=1_000_000) -> DetectorConfig:
    benign, malicious = detector_battery(config, steps, seed)
    k_m, k_r = calibrate_thresholds(benign.values(), malicious.values())
    return DetectorConfig(k_m, k_r, sampling_interval)


def stealth_verdicts(cfg: DetectorConfig, samples):
    return {name: classify(cfg, s) for name, s in samples.items()}
