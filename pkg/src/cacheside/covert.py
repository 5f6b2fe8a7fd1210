"""Packetised covert channel over Flush+Flush, Flush+Reload or Prime+Probe.

A packet of ``N`` bytes carries ``N-3`` payload bytes, a sequence number and
a CRC-16.  Every packet bit has its own shared line (or eviction set), so a
whole packet crosses the channel in one slot.  The receiver acknowledges a
packet with a valid checksum by signalling its sequence number on dedicated
ACK lines; the sender retransmits until it sees that acknowledgement.
"""
from __future__ import annotations

import binascii
import struct
from dataclasses import dataclass, field

from .cache_model import CYCLES_PER_SECOND, CacheConfig, CounterSample, MemorySystem
from .errors import ConfigError, InfeasibleConfigError, TransmissionError
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

ACK_BITS = 16
SHARED_BASE = 0x4000_0000
SENDER_REGION = MemoryRegion(0x1000_0000, 0x1000_0000)
RECEIVER_REGION = MemoryRegion(0x2000_0000, 0x1000_0000)
PP_MEMORY_BUDGET = 1 << 30


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection, no xorout)."""
    return binascii.crc_hqx(bytes(data), 0xFFFF)


@dataclass(frozen=True)
class Packet:
    payload: bytes
    seq: int

    @property
    def crc(self):
        return crc16(self.payload + bytes([self.seq]))

    @property
    def size(self):
        return len(self.payload) + 3


def _bits_lsb_first(data):
    return [(byte >> i) & 1 for byte in data for i in range(8)]


def _bytes_lsb_first(bits):
    out = bytearray()
    for k in range(0, len(bits), 8):
        out.append(sum(b << i for i, b in enumerate(bits[k:k + 8])))
    return bytes(out)


def encode_packet(payload: bytes, seq: int, packet_size: int | None = None) -> list:
    payload = bytes(payload)
    if packet_size is not None and len(payload) != packet_size - 3:
        raise ValueError(f"payload must be {packet_size - 3} bytes for N={packet_size}, got {len(payload)}")
    if len(payload) < 1:
        raise ValueError("packets need at least one payload byte (N >= 4)")
    if not 0 <= seq < 256:
        raise ValueError("sequence numbers are single bytes")
    body = payload + bytes([seq])
    return _bits_lsb_first(body + crc16(body).to_bytes(2, "big"))


def decode_packet(bits, packet_size: int | None = None) -> Packet | None:
    """Return the packet, or None when the checksum does not match."""
    bits = list(bits)
    if len(bits) % 8 or len(bits) < 32:
        raise ValueError(f"bit vector of length {len(bits)} is not a whole packet")
    if packet_size is not None and len(bits) != 8 * packet_size:
        raise ValueError(f"expected {8 * packet_size} bits, got {len(bits)}")
    raw = _bytes_lsb_first(bits)
    body, crc = raw[:-2], int.from_bytes(raw[-2:], "big")
    if crc16(body) != crc:
        return None
    return Packet(body[:-1], body[-1])


def frame_message(message: bytes, packet_size: int) -> list:
    """Split ``message`` into payloads: 4-byte big-endian length, then data,
    zero-padded to a whole number of payloads."""
    per = packet_size - 3
    blob = struct.pack(">I", len(message)) + bytes(message)
    blob += bytes(-len(blob) % per)
    return [blob[i:i + per] for i in range(0, len(blob), per)]


def unframe(payloads) -> bytes | None:
    blob = b"".join(payloads)
    if len(blob) < 4:
        return None
    (n,) = struct.unpack(">I", blob[:4])
    if len(blob) - 4 < n:
        return None
    return blob[4:4 + n]


def ack_pattern(seq):
    """ACK wire format: the sequence byte followed by its complement."""
    return _bits_lsb_first(bytes([seq, seq ^ 0xFF]))


def pp_memory_required(config: CacheConfig, packet_size: int) -> int:
    """Bytes an unprivileged attacker must map to find congruent pages for
    every Prime+Probe eviction set (one page in ``sets*line/page * slices``
    holds a line of a given set and slice)."""
    l3 = config.levels[2]
    pages_per_hit = max(l3.sets * config.line_size // config.page_size, 1) * config.n_slices
    n_sets = 8 * packet_size + ACK_BITS
    return n_sets * l3.ways * config.page_size * pages_per_hit


@dataclass
class ChannelConfig:
    technique: Technique
    packet_size: int
    data_lines: tuple
    ack_lines: tuple
    slot_probes: int = 3
    ack_probes: int = 3
    max_retransmits: int = 32
    interleave: int = 1
    cache_config: CacheConfig = field(default_factory=CacheConfig)
    sender_sets: dict = field(default_factory=dict, repr=False)
    receiver_sets: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.technique = Technique.parse(self.technique)
        if self.packet_size < 4:
            raise ConfigError("packet size N must be at least 4 bytes")
        if len(self.data_lines) != 8 * self.packet_size:
            raise ConfigError("need one data line per packet bit")
        if len(self.ack_lines) != ACK_BITS:
            raise ConfigError(f"need {ACK_BITS} ACK lines")
        if self.slot_probes < 1 or self.ack_probes < 1:
            raise ConfigError("slot_probes and ack_probes must be >= 1")
        if self.interleave != 1:
            raise ConfigError("only lock-step interleaving (1) is supported")
        if self.technique is not Technique.FF:
            page = self.cache_config.page_size
            pages = [a // page for a in self.data_lines + self.ack_lines]
            if len(set(pages)) != len(pages):
                raise ConfigError(f"{self.technique.value} needs at most one monitored line per page")

    @classmethod
    def build(cls, technique="ff", packet_size=28, cache_config=None, base=SHARED_BASE,
              memory_budget=PP_MEMORY_BUDGET, **kw):
        tech = Technique.parse(technique)
        cfg = cache_config or CacheConfig()
        n = 8 * packet_size + ACK_BITS
        if tech is Technique.FF:
            # several lines per page are fine: Flush+Flush never triggers the prefetcher
            lines = [base + i * cfg.line_size for i in range(n)]
        else:
            lines = [base + i * (cfg.page_size + cfg.line_size) for i in range(n)]
        if tech is Technique.PP:
            need = pp_memory_required(cfg, packet_size)
            if need > memory_budget:
                raise InfeasibleConfigError(
                    f"Prime+Probe with {packet_size}-byte packets needs {8 * packet_size + ACK_BITS} eviction sets "
                    f"of {cfg.levels[2].ways} addresses each, one address per page; finding congruent pages "
                    f"requires mapping about {need / 2**30:.1f} GiB (budget {memory_budget / 2**30:.1f} GiB). "
                    f"Use a smaller packet size such as 5 bytes."
                )
        data, ack = tuple(lines[:-ACK_BITS]), tuple(lines[-ACK_BITS:])
        out = cls(tech, packet_size, data, ack, cache_config=cfg, **kw)
        if tech is Technique.PP:
            probe = MemorySystem(cfg)
            used_s, used_r = set(lines_pages(lines, cfg)), set(lines_pages(lines, cfg))
            for t in lines:
                es = build_eviction_set(probe, t, SENDER_REGION, used_s)
                er = build_eviction_set(probe, t, RECEIVER_REGION, used_r)
                used_s.update(m // cfg.page_size for m in es)
                used_r.update(m // cfg.page_size for m in er)
                out.sender_sets[t] = es
                out.receiver_sets[t] = er
        return out

    @property
    def payload_size(self):
        return self.packet_size - 3


def lines_pages(lines, cfg):
    return [a // cfg.page_size for a in lines]


@dataclass
class ChannelMetrics:
    technique: str
    packet_size: int
    bits_sent: int = 0
    bits_received: int = 0
    bit_errors: int = 0
    packets: int = 0
    retransmissions: int = 0
    delivered_bytes: int = 0
    runtime_cycles: int = 0
    delivered: bytes = b""
    ok: bool = False
    sender_counters: CounterSample = field(default_factory=CounterSample)
    receiver_counters: CounterSample = field(default_factory=CounterSample)

    @property
    def bits_transmitted(self):
        return min(self.bits_sent, self.bits_received)

    @property
    def error_rate(self):
        return self.bit_errors / self.bits_transmitted if self.bits_transmitted else 0.0

    @property
    def runtime_seconds(self):
        return self.runtime_cycles / CYCLES_PER_SECOND

    @property
    def rate(self):
        """Delivered message bytes per (simulated) second."""
        return self.delivered_bytes / self.runtime_seconds if self.runtime_cycles else 0.0

    @property
    def cycles_per_byte(self):
        return self.runtime_cycles / self.delivered_bytes if self.delivered_bytes else float("inf")

    def summary(self):
        return {
            "technique": self.technique,
            "packet_size": self.packet_size,
            "ok": self.ok,
            "bits_sent": self.bits_sent,
            "bits_received": self.bits_received,
            "bits_transmitted": self.bits_transmitted,
            "bit_errors": self.bit_errors,
            "error_rate": round(self.error_rate, 6),
            "packets": self.packets,
            "retransmissions": self.retransmissions,
            "delivered_bytes": self.delivered_bytes,
            "runtime_cycles": self.runtime_cycles,
            "runtime_seconds": self.runtime_seconds,
            "rate_bytes_per_s": round(self.rate, 3),
            "cycles_per_byte": round(self.cycles_per_byte, 3),
            "cycles_per_second": CYCLES_PER_SECOND,
        }


class Endpoint:
    """One side of the channel: a backend plus the probe/signal primitives
    for the configured technique."""

    def __init__(self, backend, cfg: ChannelConfig, sets=None, threshold=None):
        self.backend = backend
        self.cfg = cfg
        self.tech = cfg.technique
        self.sets = sets or {}
        self.threshold = threshold

    def signal(self, line):
        """Make ``line`` look active to the other side."""
        if self.tech is Technique.PP:
            for m in self.sets[line].members:
                self.backend.plain_access(m)
        else:
            self.backend.plain_access(line)

    def probe(self, line) -> bool:
        if self.tech is Technique.FF:
            return ff_probe(self.backend, line, self.threshold).active
        if self.tech is Technique.FR:
            return fr_probe(self.backend, line, self.threshold).active
        return pp_probe(self.backend, self.sets[line], self.threshold).active

    def reset(self, lines):
        """Bring monitored lines into the idle state before the first probe."""
        for line in lines:
            if self.tech is Technique.PP:
                pp_prime(self.backend, self.sets[line])
            else:
                self.backend.plain_flush(line)


def send_bit(endpoint: Endpoint, line, bit):
    if bit:
        endpoint.signal(line)


def receive_bit(votes) -> int:
    """Majority vote over per-probe verdicts (True = active)."""
    votes = list(votes)
    return int(2 * sum(votes) > len(votes))


def _calibrate(cfg: ChannelConfig, line, sets_prober, sets_helper, seed_offset):
    """Calibrate on a scratch copy so the channel's own counters stay clean."""
    scratch = MemorySystem(cfg.cache_config.replace(seed=(cfg.cache_config.seed + seed_offset) % 2**64))
    scratch.register("prober", 1)
    scratch.register("helper", 0)
    prober = SimulatedBackend(scratch, "prober")
    helper = SimulatedBackend(scratch, "helper")
    if cfg.technique is Technique.PP:
        return calibrate_pp(prober, sets_prober[line], 200, helper=helper, victim_addr=sets_helper[line].members[0])
    return calibrate(prober, line, 200, cfg.technique.value, helper=helper)


def calibrate_channel(cfg: ChannelConfig):
    data = _calibrate(cfg, cfg.data_lines[0], cfg.receiver_sets, cfg.sender_sets, 1)
    ack = _calibrate(cfg, cfg.ack_lines[0], cfg.sender_sets, cfg.receiver_sets, 2)
    return {"data": data, "ack": ack}


class _Run:
    def __init__(self, cfg, payloads, sender: Endpoint, receiver: Endpoint, metrics):
        self.cfg = cfg
        self.payloads = payloads
        self.sender = sender
        self.receiver = receiver
        self.m = metrics
        self.wire = None
        self.accepted = []
        self.failed = False

    def sender_steps(self):
        cfg, ep = self.cfg, self.sender
        ep.reset(cfg.ack_lines)
        yield
        for index, payload in enumerate(self.payloads):
            seq = index % 256
            bits = encode_packet(payload, seq, cfg.packet_size)
            for attempt in range(cfg.max_retransmits + 1):
                self.wire = bits
                self.m.bits_sent += len(bits)
                if attempt:
                    self.m.retransmissions += 1
                for _ in range(cfg.slot_probes):
                    for line, bit in zip(cfg.data_lines, bits):
                        send_bit(ep, line, bit)
                    yield
                votes = [[] for _ in range(ACK_BITS)]
                for r in range(cfg.ack_probes):
                    if r:
                        for v, line in zip(votes, cfg.ack_lines):
                            v.append(not ep.probe(line) if ep.tech is Technique.FF else ep.probe(line))
                    if ep.tech is Technique.FF:
                        # warm the ACK lines; the receiver flushes the ones it signals
                        for line in cfg.ack_lines:
                            ep.backend.plain_access(line)
                    yield
                for v, line in zip(votes, cfg.ack_lines):
                    v.append(not ep.probe(line) if ep.tech is Technique.FF else ep.probe(line))
                yield
                if [receive_bit(v) for v in votes] == ack_pattern(seq):
                    self.m.packets += 1
                    break
            else:
                self.failed = True
                return

    def receiver_steps(self):
        cfg, ep = self.cfg, self.receiver
        ep.reset(cfg.data_lines)
        yield
        expected = 0
        while True:
            votes = [[] for _ in cfg.data_lines]
            for _ in range(cfg.slot_probes):
                for v, line in zip(votes, cfg.data_lines):
                    v.append(ep.probe(line))
                yield
            bits = [receive_bit(v) for v in votes]
            self.m.bits_received += len(bits)
            if self.wire is not None:
                self.m.bit_errors += sum(a != b for a, b in zip(bits, self.wire))
            pkt = decode_packet(bits, cfg.packet_size)
            ack = None
            if pkt is not None:
                if pkt.seq == expected:
                    self.accepted.append(pkt.payload)
                    expected = (expected + 1) % 256
                    ack = pkt.seq
                elif pkt.seq == (expected - 1) % 256:
                    ack = pkt.seq  # duplicate: the ACK was lost, re-acknowledge and drop
            pattern = ack_pattern(ack) if ack is not None else [0] * ACK_BITS
            for _ in range(cfg.ack_probes):
                for line, bit in zip(cfg.ack_lines, pattern):
                    if bit:
                        if ep.tech is Technique.FF:
                            ep.backend.plain_flush(line)
                        else:
                            ep.signal(line)
                yield
            yield


def transmit(cfg: ChannelConfig, message: bytes, system: MemorySystem | None = None,
             thresholds=None, sender_core=0, receiver_core=1, observers=()) -> ChannelMetrics:
    """Run sender and receiver to completion and return channel metrics.

    Raises TransmissionError (carrying partial metrics) when a packet is not
    acknowledged within ``max_retransmits`` retransmissions.
    """
    message = bytes(message)
    system = system or MemorySystem(cfg.cache_config)
    if thresholds is None:
        thresholds = calibrate_channel(cfg)
    system.register("sender", sender_core)
    system.register("receiver", receiver_core)
    sender = Endpoint(SimulatedBackend(system, "sender"), cfg, cfg.sender_sets, thresholds["ack"])
    receiver = Endpoint(SimulatedBackend(system, "receiver"), cfg, cfg.receiver_sets, thresholds["data"])
    metrics = ChannelMetrics(cfg.technique.value, cfg.packet_size)
    run = _Run(cfg, frame_message(message, cfg.packet_size), sender, receiver, metrics)
    start = system.current_time
    sched = Scheduler(system)
    sched.add("sender", run.sender_steps())
    sched.add("receiver", run.receiver_steps())
    for ob in observers:
        sched.observe(ob)
    sched.run(until_done=["sender"])
    metrics.runtime_cycles = system.current_time - start
    metrics.sender_counters = system.read_counters("sender")
    metrics.receiver_counters = system.read_counters("receiver")
    delivered = unframe(run.accepted)
    metrics.delivered = delivered or b""
    metrics.delivered_bytes = len(metrics.delivered)
    metrics.ok = not run.failed and delivered == message
    if run.failed:
        raise TransmissionError(
            f"packet {metrics.packets} not acknowledged after {cfg.max_retransmits} retransmissions", metrics
        )
    return metrics
