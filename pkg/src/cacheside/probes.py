"""Flush+Flush, Flush+Reload and Prime+Probe primitives.

Probes talk to a backend exposing ``timed_flush``, ``timed_access``,
``plain_access``, ``plain_flush`` and ``serialize``.  ``SimulatedBackend``
binds those to one actor of a ``MemorySystem``; ``hw_timing`` provides the
hardware equivalent.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_latencies
from .errors import CalibrationError, EvictionSetError, ProbeMisuseError


class Technique(str, Enum):
    FF = "ff"
    FR = "fr"
    PP = "pp"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown technique {value!r}; expected ff, fr or pp") from None


class Verdict(str, Enum):
    ACTIVE = "VictimActive"
    IDLE = "VictimIdle"


# FF: slow flush means cached; FR: fast reload means cached; PP: slow probe means evicted
POLARITY = {Technique.FF: "above", Technique.FR: "below", Technique.PP: "above"}


class SimulatedBackend:
    """ProbeBackend bound to one registered actor of a MemorySystem."""

    def __init__(self, system, actor):
        system.actor(actor)
        self.system = system
        self.actor = actor
        self._primed = {}

    @property
    def core(self):
        return self.system.actor(self.actor).core

    def timed_flush(self, addr):
        return self.system.flush(self.actor, addr).latency

    def timed_access(self, addr):
        return self.system.access(self.actor, addr).latency

    def plain_access(self, addr):
        self.system.access(self.actor, addr)

    def plain_flush(self, addr):
        self.system.flush(self.actor, addr)

    def serialize(self):
        # the simulator executes operations in program order already
        pass

    def wait(self, cycles):
        if cycles > 0:
            self.system.idle(self.actor, cycles)


@dataclass(frozen=True)
class ProbeSample:
    latency: int
    verdict: Verdict
    kind: Technique

    @property
    def active(self):
        return self.verdict is Verdict.ACTIVE


class Threshold(ClassifierMixin, BaseEstimator):
    """Latency decision boundary learnt from labelled calibration timings.

    ``y`` is 1 for rounds where the victim was active (line cached for FF/FR,
    set disturbed for PP) and 0 otherwise.  The boundary is the midpoint of
    the two cluster means, rounded toward the idle cluster; a tie at the
    boundary counts as active.
    """

    def __init__(self, technique="ff", min_accuracy=0.75):
        self.technique = technique
        self.min_accuracy = min_accuracy

    def fit(self, X, y):
        tech = Technique.parse(self.technique)
        lat = check_latencies(X)
        y = np.asarray(y).astype(bool)
        if lat.shape[0] != y.shape[0]:
            raise ValueError("latencies and labels differ in length")
        if y.all() or not y.any():
            raise CalibrationError("calibration needs both active and idle samples")
        active, idle = lat[y], lat[~y]
        mean_a, mean_i = float(active.mean()), float(idle.mean())
        mid = (mean_a + mean_i) / 2
        boundary = math.floor(mid) if mean_i <= mean_a else math.ceil(mid)
        lo, hi = sorted((mean_a, mean_i))
        if not lo < boundary < hi:
            raise CalibrationError(
                f"{tech.value} clusters overlap (active mean {mean_a:.2f}, idle mean {mean_i:.2f})"
            )
        polarity = POLARITY[tech]
        if (polarity == "above") != (mean_a > mean_i):
            raise CalibrationError(f"{tech.value} clusters are inverted (active mean {mean_a:.2f}, idle {mean_i:.2f})")
        self.classes_ = np.array([0, 1])
        self.boundary_ = int(boundary)
        self.polarity_ = polarity
        self.technique_ = tech
        self.active_mean_ = mean_a
        self.idle_mean_ = mean_i
        self.hist_active_ = dict(sorted(Counter(int(v) for v in active).items()))
        self.hist_idle_ = dict(sorted(Counter(int(v) for v in idle).items()))
        self.histogram_ = dict(sorted(Counter(int(v) for v in lat).items()))
        acc = float(np.mean(self.predict(lat) == y))
        self.train_accuracy_ = acc
        if acc < self.min_accuracy:
            raise CalibrationError(f"{tech.value} clusters overlap: calibration accuracy {acc:.3f}")
        return self

    @classmethod
    def fixed(cls, boundary, technique="ff"):
        """A threshold with a known boundary and no calibration data."""
        tech = Technique.parse(technique)
        t = cls(technique=tech.value)
        t.classes_ = np.array([0, 1])
        t.boundary_ = int(boundary)
        t.polarity_ = POLARITY[tech]
        t.technique_ = tech
        t.active_mean_ = t.idle_mean_ = float("nan")
        t.hist_active_, t.hist_idle_, t.histogram_ = {}, {}, {}
        t.train_accuracy_ = float("nan")
        return t

    def is_active(self, latency) -> bool:
        if self.polarity_ == "above":
            return latency >= self.boundary_
        return latency <= self.boundary_

    def verdict(self, latency) -> Verdict:
        return Verdict.ACTIVE if self.is_active(latency) else Verdict.IDLE

    def predict(self, X):
        check_is_fitted(self, "boundary_")
        lat = check_latencies(X)
        if self.polarity_ == "above":
            return (lat >= self.boundary_).astype(int)
        return (lat <= self.boundary_).astype(int)

    def decision_function(self, X):
        check_is_fitted(self, "boundary_")
        lat = check_latencies(X)
        sign = 1.0 if self.polarity_ == "above" else -1.0
        return sign * (lat - self.boundary_)

    @property
    def gap(self):
        """Distance between the cluster modes (the cached/uncached delta for FF)."""
        check_is_fitted(self, "boundary_")
        mode = lambda h: max(h, key=h.get)
        return abs(mode(self.hist_active_) - mode(self.hist_idle_))


def calibrate(backend, addr, rounds=1000, technique="ff", helper=None, min_accuracy=0.75) -> Threshold:
    """Time ``rounds`` probes with ``addr`` cached and ``rounds`` with it not.

    ``helper`` is an optional second backend (another core) that performs the
    caching access, which places the line in the shared L3 only, as a victim
    would.  Defaults to the prober itself.
    """
    tech = Technique.parse(technique)
    if tech is Technique.PP:
        raise ValueError("use calibrate_pp for Prime+Probe")
    if rounds < 100:
        raise ValueError("calibration needs at least 100 rounds")
    helper = helper or backend
    lat, y = [], []
    for _ in range(rounds):
        for cached in (1, 0):
            if cached:
                helper.plain_access(addr)
            else:
                backend.plain_flush(addr)
            backend.serialize()
            if tech is Technique.FF:
                lat.append(backend.timed_flush(addr))
            else:
                lat.append(backend.timed_access(addr))
                backend.plain_flush(addr)
            y.append(cached)
    return Threshold(tech.value, min_accuracy).fit(lat, y)


def calibrate_pp(backend, evset, rounds=1000, helper=None, victim_addr=None, min_accuracy=0.75) -> Threshold:
    """Summed set-probe latency with and without a congruent victim access."""
    if rounds < 100:
        raise ValueError("calibration needs at least 100 rounds")
    helper = helper or backend
    victim_addr = evset.target if victim_addr is None else victim_addr
    pp_prime(backend, evset)
    lat, y = [], []
    for _ in range(rounds):
        for active in (1, 0):
            if active:
                helper.plain_access(victim_addr)
                helper.plain_flush(victim_addr)
            lat.append(pp_probe_latency(backend, evset))
            y.append(active)
    return Threshold("pp", min_accuracy).fit(lat, y)


def ff_probe(backend, addr, threshold) -> ProbeSample:
    lat = backend.timed_flush(addr)
    return ProbeSample(lat, threshold.verdict(lat), Technique.FF)


def fr_probe(backend, addr, threshold) -> ProbeSample:
    lat = backend.timed_access(addr)
    backend.plain_flush(addr)
    return ProbeSample(lat, threshold.verdict(lat), Technique.FR)


# --------------------------------------------------------------- Prime+Probe
@dataclass(frozen=True)
class EvictionSet:
    target: int
    members: tuple
    page_size: int = 4096

    def __post_init__(self):
        pages = [m // self.page_size for m in self.members]
        if len(set(pages)) != len(pages):
            raise EvictionSetError("eviction-set members must lie on distinct pages")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


@dataclass(frozen=True)
class MemoryRegion:
    """Address range the attacker may allocate eviction-set pages from."""

    base: int
    size: int

    @property
    def end(self):
        return self.base + self.size


def build_eviction_set(config, target, region=None, exclude_pages=()) -> EvictionSet:
    """Static eviction set: one congruent (set, slice) address per page.

    Candidates are scanned in increasing address order with a stride of one
    L3 slice-set period, so the result is deterministic.
    """
    from .cache_model import MemorySystem

    probe = MemorySystem(config) if not hasattr(config, "slice_of") else config
    cfg = probe.config
    region = region or MemoryRegion(0, cfg.address_space)
    if not 0 <= target < cfg.address_space:
        raise EvictionSetError(f"target {target:#x} outside the address space")
    ways = cfg.levels[2].ways
    stride = cfg.levels[2].sets * cfg.line_size
    want_slice = probe.slice_of(target)
    excluded = set(exclude_pages) | {target // cfg.page_size}
    offset = target % stride
    first = region.base + ((offset - region.base) % stride)
    members = []
    for addr in range(first, min(region.end, cfg.address_space), stride):
        page = addr // cfg.page_size
        if page in excluded or probe.slice_of(addr) != want_slice:
            continue
        members.append(addr)
        excluded.add(page)
        if len(members) == ways:
            return EvictionSet(target, tuple(members), cfg.page_size)
    raise EvictionSetError(
        f"only {len(members)} of {ways} congruent pages available for target {target:#x} "
        f"in a {region.size}-byte region"
    )


def pp_prime(backend, evset):
    for m in evset.members:
        backend.plain_access(m)
    backend._primed[evset] = True


def pp_probe_latency(backend, evset) -> int:
    """Re-access the set in reverse of the previous traversal and sum timings.

    Each probe also re-primes the set, so successive rounds alternate the
    traversal direction and never evict their own members under LRU.
    """
    forward = backend._primed.get(evset)
    if forward is None:
        raise ProbeMisuseError("Prime+Probe probe issued before pp_prime on this eviction set")
    order = reversed(evset.members) if forward else evset.members
    total = sum(backend.timed_access(m) for m in order)
    backend._primed[evset] = not forward
    return total


def pp_probe(backend, evset, threshold) -> ProbeSample:
    lat = pp_probe_latency(backend, evset)
    return ProbeSample(lat, threshold.verdict(lat), Technique.PP)


def write_histogram_csv(fh, threshold, header=None):
    """Write ``latency,count`` rows, one block per cluster, preceded by
    ``#`` comment lines carrying metadata."""
    for key, value in (header or {}).items():
        fh.write(f"# {key}={value}\n")
    fh.write(f"# boundary={threshold.boundary_}\n")
    w = csv.writer(fh, lineterminator="\n")
    for name, hist in (("active", threshold.hist_active_), ("idle", threshold.hist_idle_)):
        fh.write(f"# series={name}\n")
        w.writerow(("latency", "count"))
        for lat, count in hist.items():
            w.writerow((lat, count))
