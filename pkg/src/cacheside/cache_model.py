"""Deterministic model of an inclusive, sliced three-level cache hierarchy.

Every core owns private L1 and L2 caches; the L3 is shared and split into
slices selected by an XOR hash of the line address.  ``access`` and ``flush``
return cycle-accounted outcomes and update per-actor event counters that mimic
the last-level-cache events consumed by counter-based attack detectors.

The model is a single-threaded state machine: callers (normally the
scheduler) must never invoke it concurrently.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

from ._validation import check_positive, check_power_of_two
from .errors import AddressError, ConfigError, UnknownActorError

#: Reporting convention used to turn simulated cycles into seconds (3.6 GHz).
CYCLES_PER_SECOND = 3.6e9


class HitLevel(str, Enum):
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    DRAM = "DRAM"


@dataclass(frozen=True)
class LevelGeometry:
    ways: int
    sets: int

    @property
    def lines(self):
        return self.ways * self.sets


@dataclass(frozen=True)
class Latencies:
    """Cycle costs.  Only the two flush deltas are grounded in measurements;
    the bases are chosen so that hit < flush < DRAM."""

    l1_hit: int = 4
    l2_hit: int = 12
    l3_local_hit: int = 30
    l3_remote_penalty: int = 3
    dram: int = 200
    flush_miss: int = 100
    flush_hit_delta: int = 12
    flush_remote_penalty: int = 3


DEFAULT_LEVELS = (LevelGeometry(8, 64), LevelGeometry(8, 512), LevelGeometry(16, 2048))

#: Microarchitecture presets.  They differ only in the cached/uncached
#: clflush delta; everything else stays at the invented defaults.
PRESETS = {
    "haswell": {"flush_hit_delta": 12},
    "sandybridge": {"flush_hit_delta": 12},
    "ivybridge": {"flush_hit_delta": 9},
}

#: Timing/traffic noise profiles layered on top of a preset.
NOISE_PROFILES = {
    "quiet": {},
    # interrupt-like latency outliers plus foreign LLC traffic from other cores
    "desktop": {"jitter_bound": 8, "spike_rate": 0.005, "spike_bound": 40, "ambient_rate": 1e-5},
}


def default_slice_masks(line_size, n_slices, address_bits):
    """XOR-fold matrix: slice bit ``b`` is the parity of address bits
    ``offset + b + k*width`` for every ``k``, where ``width = log2(n_slices)``."""
    width = n_slices.bit_length() - 1
    offset = line_size.bit_length() - 1
    masks = []
    for b in range(width):
        mask = 0
        for bit in range(offset + b, address_bits, width):
            mask |= 1 << bit
        masks.append(mask)
    return tuple(masks)


@dataclass(frozen=True)
class CacheConfig:
    line_size: int = 64
    levels: tuple = DEFAULT_LEVELS
    n_slices: int = 4
    n_cores: int | None = None
    latencies: Latencies = field(default_factory=Latencies)
    constant_time_flush: bool = False
    jitter_bound: int = 0
    seed: int = 0
    address_bits: int = 32
    page_size: int = 4096
    slice_masks: tuple | None = None
    prefetcher: bool = False
    spike_rate: float = 0.0
    spike_bound: int = 0
    ambient_rate: float = 0.0

    def __post_init__(self):
        levels = tuple(lv if isinstance(lv, LevelGeometry) else LevelGeometry(*_pair(lv)) for lv in self.levels)
        object.__setattr__(self, "levels", levels)
        if isinstance(self.latencies, dict):
            object.__setattr__(self, "latencies", Latencies(**self.latencies))
        if self.n_cores is None:
            object.__setattr__(self, "n_cores", self.n_slices)
        if len(levels) != 3:
            raise ConfigError("exactly three cache levels (L1, L2, L3) are modelled")
        check_power_of_two(self.line_size, "line_size")
        check_power_of_two(self.n_slices, "n_slices")
        check_power_of_two(self.page_size, "page_size")
        for name, lv in zip(("L1", "L2", "L3"), levels):
            check_power_of_two(lv.sets, f"{name} sets")
            check_positive(lv.ways, f"{name} ways")
        check_positive(self.n_cores, "n_cores")
        sizes = [lv.lines * self.line_size for lv in levels]
        sizes[2] *= self.n_slices
        if not sizes[2] >= sizes[1] >= sizes[0]:
            raise ConfigError(f"capacities must satisfy L3 >= L2 >= L1, got {sizes}")
        lat = self.latencies
        if lat.flush_hit_delta <= 0 and not self.constant_time_flush:
            raise ConfigError("flush_hit_delta must be > 0 unless constant_time_flush is set")
        if any(getattr(lat, f.name) < 0 for f in fields(lat)):
            raise ConfigError("latencies must be non-negative")
        if self.jitter_bound < 0 or self.spike_bound < 0:
            raise ConfigError("jitter_bound and spike_bound must be >= 0")
        if not 0.0 <= self.spike_rate <= 1.0:
            raise ConfigError("spike_rate must lie in [0, 1]")
        if self.ambient_rate < 0:
            raise ConfigError("ambient_rate must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        line_bits = self.line_size.bit_length() - 1
        if self.address_bits <= line_bits + (self.levels[2].sets.bit_length() - 1):
            raise ConfigError("address space too small for the L3 geometry")
        if self.slice_masks is None:
            masks = default_slice_masks(self.line_size, self.n_slices, self.address_bits)
            object.__setattr__(self, "slice_masks", masks)
        else:
            masks = tuple(int(m, 0) if isinstance(m, str) else int(m) for m in self.slice_masks)
            if len(masks) != self.n_slices.bit_length() - 1:
                raise ConfigError("need one slice mask per slice-index bit")
            if any(m & (self.line_size - 1) for m in masks):
                raise ConfigError("slice masks must not include line-offset bits")
            object.__setattr__(self, "slice_masks", masks)

    @classmethod
    def preset(cls, name="haswell", noise="quiet", **overrides):
        try:
            lat = replace(Latencies(), **PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        try:
            noise_kw = dict(NOISE_PROFILES[noise])
        except KeyError:
            raise ConfigError(f"unknown noise profile {noise!r}; choose from {sorted(NOISE_PROFILES)}") from None
        lat_over = overrides.pop("latencies", None) or {}
        if isinstance(lat_over, Latencies):
            lat = lat_over
        else:
            lat = replace(lat, **lat_over)
        noise_kw.update(overrides)
        return cls(latencies=lat, **noise_kw)

    @classmethod
    def from_mapping(cls, mapping):
        """Build a config from a (possibly flat, dotted-key) mapping."""
        data = {}
        lat = {}
        levels = list(DEFAULT_LEVELS)
        for key, value in mapping.items():
            if key.startswith("latencies."):
                lat[key.split(".", 1)[1]] = int(value)
            elif key == "latencies":
                lat.update({k: int(v) for k, v in dict(value).items()})
            elif key in ("l1", "l2", "l3"):
                levels["l1 l2 l3".split().index(key)] = LevelGeometry(*_pair(value))
            elif key == "levels":
                levels = [LevelGeometry(*_pair(v)) for v in value]
            else:
                data[key] = value
        base = data.pop("preset", None)
        noise = data.pop("noise", "quiet")
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = {k: _coerce(known[k].type, v) for k, v in data.items()}
        if base is not None or noise != "quiet":
            return cls.preset(base or "haswell", noise, levels=tuple(levels), latencies=lat, **data)
        return cls(levels=tuple(levels), latencies=Latencies(**lat), **data)

    def to_mapping(self):
        d = asdict(self)
        d["levels"] = [[lv.ways, lv.sets] for lv in self.levels]
        d["slice_masks"] = [hex(m) for m in self.slice_masks]
        return d

    def replace(self, **changes):
        if "slice_masks" not in changes and ("n_slices" in changes or "line_size" in changes or "address_bits" in changes):
            changes["slice_masks"] = None
        if "n_slices" in changes and "n_cores" not in changes:
            changes["n_cores"] = None
        return replace(self, **changes)

    @property
    def address_space(self):
        return 1 << self.address_bits


def _pair(value):
    if isinstance(value, str):
        ways, sets = value.lower().split("x")
        return int(ways), int(sets)
    if isinstance(value, dict):
        return int(value["ways"]), int(value["sets"])
    ways, sets = value
    return int(ways), int(sets)


def _coerce(annotation, value):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if "bool" in str(annotation):
        return text.lower() in ("1", "true", "yes", "on")
    if "float" in str(annotation):
        return float(text)
    if "tuple" in str(annotation):
        return tuple(int(v, 0) for v in text.replace(",", " ").split())
    return int(text, 0)


def load_config(path):
    """Read a JSON file or a plain ``key = value`` text file into a CacheConfig."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        return CacheConfig.from_mapping(json.loads(text))
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        mapping[key] = value
    return CacheConfig.from_mapping(mapping)


@dataclass(frozen=True)
class CounterSample:
    cache_references: int = 0
    cache_misses: int = 0
    itlb_ra: int = 0
    itlb_wa: int = 0
    instructions: int = 0
    cycles: int = 0

    def __sub__(self, other):
        return CounterSample(*(a - b for a, b in zip(astuple_fast(self), astuple_fast(other))))

    def __add__(self, other):
        return CounterSample(*(a + b for a, b in zip(astuple_fast(self), astuple_fast(other))))

    @property
    def itlb_events(self):
        return self.itlb_ra + self.itlb_wa


def astuple_fast(s):
    return (s.cache_references, s.cache_misses, s.itlb_ra, s.itlb_wa, s.instructions, s.cycles)


class _Counters:
    __slots__ = ("refs", "misses", "itlb_ra", "itlb_wa", "instructions", "cycles")

    def __init__(self):
        self.refs = self.misses = self.itlb_ra = self.itlb_wa = self.instructions = self.cycles = 0

    def snapshot(self):
        return CounterSample(self.refs, self.misses, self.itlb_ra, self.itlb_wa, self.instructions, self.cycles)


@dataclass
class ActorContext:
    id: object
    core: int
    itlb_events_per_step: int = 1
    counters: _Counters = field(default_factory=_Counters, repr=False)


@dataclass(frozen=True)
class AccessOutcome:
    latency: int
    hit_level: HitLevel
    slice: int


@dataclass(frozen=True)
class FlushOutcome:
    latency: int
    was_cached: bool
    slice: int


class MemorySystem:
    """Shared inclusive L3 (sliced) plus per-core private L1/L2, strict LRU."""

    def __init__(self, config: CacheConfig | None = None):
        self.config = config = config or CacheConfig()
        self.current_time = 0
        self._rng = random.Random(config.seed)
        self._line_bits = config.line_size.bit_length() - 1
        self._page_lines = max(config.page_size // config.line_size, 1)
        l1, l2, l3 = config.levels
        self._ways = (l1.ways, l2.ways, l3.ways)
        self._set_mask = (l1.sets - 1, l2.sets - 1, l3.sets - 1)
        self._l3_sets = l3.sets
        self._l1 = [[{} for _ in range(l1.sets)] for _ in range(config.n_cores)]
        self._l2 = [[{} for _ in range(l2.sets)] for _ in range(config.n_cores)]
        self._l3 = [[{} for _ in range(l3.sets)] for _ in range(config.n_slices)]
        self._masks = config.slice_masks
        self._actors: dict[object, ActorContext] = {}
        self._visited: dict[int, int] = {}
        self._next_foreign = -1
        self._slice_cache: dict[int, int] = {}
        #: when set to a list, every operation appends (cycle, actor, op, addr, latency)
        self.trace = None

    # ------------------------------------------------------------------ actors
    def register(self, actor_id, core=0, itlb_events_per_step=1) -> ActorContext:
        if actor_id in self._actors:
            raise ConfigError(f"actor {actor_id!r} already registered")
        if not 0 <= core < self.config.n_cores:
            raise ConfigError(f"core {core} outside 0..{self.config.n_cores - 1}")
        ctx = ActorContext(actor_id, core, itlb_events_per_step)
        self._actors[actor_id] = ctx
        return ctx

    def actor(self, actor_id) -> ActorContext:
        try:
            return self._actors[actor_id]
        except KeyError:
            raise UnknownActorError(actor_id) from None

    @property
    def actors(self):
        return dict(self._actors)

    def read_counters(self, actor_id) -> CounterSample:
        return self.actor(actor_id).counters.snapshot()

    # ------------------------------------------------------------- addressing
    def line_of(self, addr):
        return addr >> self._line_bits

    def page_of(self, addr):
        return addr // self.config.page_size

    def slice_of(self, addr) -> int:
        line = addr >> self._line_bits
        s = self._slice_cache.get(line)
        if s is None:
            s = 0
            for bit, mask in enumerate(self._masks):
                s |= ((addr & mask).bit_count() & 1) << bit
            if len(self._slice_cache) < 1 << 20:
                self._slice_cache[line] = s
        return s

    def set_index(self, addr, level=3):
        return (addr >> self._line_bits) & self._set_mask[level - 1]

    def local_slice(self, core):
        return core % self.config.n_slices

    def _check_addr(self, addr):
        if not (isinstance(addr, int) and 0 <= addr < 1 << self.config.address_bits):
            raise AddressError(f"address {addr!r} outside the {self.config.address_bits}-bit space")

    # ------------------------------------------------------------------ noise
    def _noise(self, base):
        cfg = self.config
        lat = base
        if cfg.jitter_bound:
            lat += self._rng.randint(0, cfg.jitter_bound)
        if cfg.spike_rate and self._rng.random() < cfg.spike_rate:
            lat += self._rng.randint(1, max(cfg.spike_bound, 1))
        return lat

    def _ambient(self, slice_, idx, lru):
        """Insert foreign lines that other cores would have loaded into this
        set since it was last looked up (lazy Poisson arrivals)."""
        key = slice_ * self._l3_sets + idx
        last = self._visited.get(key, 0)
        self._visited[key] = self.current_time
        mean = self.config.ambient_rate * (self.current_time - last)
        if mean <= 0:
            return
        ways = self._ways[2]
        if mean > 50:
            k = ways
        else:
            limit = math.exp(-mean)
            k, p = 0, self._rng.random()
            while p > limit and k < ways:
                k += 1
                p *= self._rng.random()
        for _ in range(k):
            self._insert_l3(lru, self._next_foreign)
            self._next_foreign -= 1

    # ------------------------------------------------------------------- fills
    def _insert_l3(self, lru, line):
        if len(lru) >= self._ways[2]:
            victim = next(iter(lru))
            del lru[victim]
            if victim >= 0:
                self._back_invalidate(victim)
        lru[line] = None

    def _back_invalidate(self, line):
        m1, m2 = self._set_mask[0], self._set_mask[1]
        for core in range(self.config.n_cores):
            self._l1[core][line & m1].pop(line, None)
            self._l2[core][line & m2].pop(line, None)

    @staticmethod
    def _insert_private(lru, line, ways):
        if len(lru) >= ways:
            del lru[next(iter(lru))]
        lru[line] = None

    # -------------------------------------------------------------- operations
    def access(self, actor, addr) -> AccessOutcome:
        ctx = self._actors.get(actor)
        if ctx is None:
            raise UnknownActorError(actor)
        self._check_addr(addr)
        lat_cfg = self.config.latencies
        line = addr >> self._line_bits
        core = ctx.core
        c = ctx.counters
        l1 = self._l1[core][line & self._set_mask[0]]
        slice_ = self.slice_of(addr)
        if line in l1:
            del l1[line]
            l1[line] = None
            level, base = HitLevel.L1, lat_cfg.l1_hit
        else:
            l2 = self._l2[core][line & self._set_mask[1]]
            if line in l2:
                del l2[line]
                l2[line] = None
                level, base = HitLevel.L2, lat_cfg.l2_hit
            else:
                c.refs += 1
                l3 = self._l3[slice_][line & self._set_mask[2]]
                if self.config.ambient_rate:
                    self._ambient(slice_, line & self._set_mask[2], l3)
                if line in l3:
                    del l3[line]
                    l3[line] = None
                    level, base = HitLevel.L3, lat_cfg.l3_local_hit
                    if slice_ != core % self.config.n_slices:
                        base += lat_cfg.l3_remote_penalty
                else:
                    c.misses += 1
                    self._insert_l3(l3, line)
                    level, base = HitLevel.DRAM, lat_cfg.dram
                self._insert_private(l2, line, self._ways[1])
            self._insert_private(l1, line, self._ways[0])
        if self.config.prefetcher:
            self._prefetch(line)
        latency = self._noise(base)
        self._account(ctx, latency, "access", addr)
        return AccessOutcome(latency, level, slice_)

    def _prefetch(self, line):
        nxt = line + 1
        if nxt % self._page_lines == 0 or (nxt << self._line_bits) >= 1 << self.config.address_bits:
            return
        s = self.slice_of(nxt << self._line_bits)
        l3 = self._l3[s][nxt & self._set_mask[2]]
        if nxt in l3:
            return
        self._insert_l3(l3, nxt)

    def flush(self, actor, addr) -> FlushOutcome:
        ctx = self._actors.get(actor)
        if ctx is None:
            raise UnknownActorError(actor)
        self._check_addr(addr)
        lat_cfg = self.config.latencies
        line = addr >> self._line_bits
        slice_ = self.slice_of(addr)
        l3 = self._l3[slice_][line & self._set_mask[2]]
        if self.config.ambient_rate:
            self._ambient(slice_, line & self._set_mask[2], l3)
        cached = line in l3
        base = lat_cfg.flush_miss
        if cached:
            del l3[line]
            self._back_invalidate(line)
            ctx.counters.refs += 1
            if not self.config.constant_time_flush:
                base += lat_cfg.flush_hit_delta
                if slice_ != ctx.core % self.config.n_slices:
                    base += lat_cfg.flush_remote_penalty
        latency = self._noise(base)
        self._account(ctx, latency, "flush", addr)
        return FlushOutcome(latency, cached, slice_)

    def execute(self, actor, instructions=1) -> int:
        """Run ``instructions`` memory-free instructions (one cycle each)."""
        ctx = self.actor(actor)
        check_positive(instructions, "instructions")
        c = ctx.counters
        c.instructions += instructions - 1
        c.itlb_ra += ctx.itlb_events_per_step * (instructions - 1)
        self._account(ctx, instructions, "execute", None)
        return instructions

    def idle(self, actor, cycles) -> int:
        """Let ``cycles`` pass for ``actor`` without executing anything."""
        ctx = self.actor(actor)
        check_positive(cycles, "cycles", strict=False)
        ctx.counters.cycles += cycles
        if self.trace is not None:
            self.trace.append((self.current_time, actor, "idle", None, cycles))
        self.current_time += cycles
        return cycles

    def _account(self, ctx, latency, op, addr):
        c = ctx.counters
        c.instructions += 1
        c.itlb_ra += ctx.itlb_events_per_step
        c.cycles += latency
        if self.trace is not None:
            self.trace.append((self.current_time, ctx.id, op, addr, latency))
        self.current_time += latency

    # ------------------------------------------------------------------ audits
    def is_cached(self, addr, level=3, core=None) -> bool:
        line = addr >> self._line_bits
        if level == 3:
            return line in self._l3[self.slice_of(addr)][line & self._set_mask[2]]
        tables = self._l1 if level == 1 else self._l2
        cores = range(self.config.n_cores) if core is None else (core,)
        return any(line in tables[c][line & self._set_mask[level - 1]] for c in cores)

    def resident_lines(self, level, core=None) -> set:
        if level == 3:
            return {ln for sl in self._l3 for st in sl for ln in st if ln >= 0}
        tables = self._l1 if level == 1 else self._l2
        cores = range(self.config.n_cores) if core is None else (core,)
        return {ln for c in cores for st in tables[c] for ln in st}

    def check_invariants(self):
        """Raise AssertionError if inclusiveness or way bounds are violated."""
        l3 = self.resident_lines(3)
        for core in range(self.config.n_cores):
            for level, tables in ((1, self._l1), (2, self._l2)):
                for st in tables[core]:
                    assert len(st) <= self._ways[level - 1], f"L{level} set over capacity"
                    missing = [ln for ln in st if ln not in l3]
                    assert not missing, f"core {core} L{level} lines {missing} not in L3"
        for sl in self._l3:
            for st in sl:
                assert len(st) <= self._ways[2], "L3 set over capacity"

    def dump_state(self) -> dict:
        """Structured snapshot (JSON-serialisable) for audits and replay checks."""

        def sets(tables):
            return {str(i): list(st) for i, st in enumerate(tables) if st}

        return {
            "time": self.current_time,
            "l3": {str(s): sets(sl) for s, sl in enumerate(self._l3)},
            "l1": {str(c): sets(t) for c, t in enumerate(self._l1)},
            "l2": {str(c): sets(t) for c, t in enumerate(self._l2)},
            "counters": {str(a): asdict(ctx.counters.snapshot()) for a, ctx in self._actors.items()},
        }

    def dump_state_text(self) -> str:
        return json.dumps(self.dump_state(), sort_keys=True, indent=1)
