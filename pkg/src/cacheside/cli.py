"""Command-line interface: ``cacheside <subcommand> [options]``.

Exit codes: 0 ok, 1 usage error, 2 calibration failure / infeasible
configuration / mapping failure, 3 attack or transmission inconclusive.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import random
import sys

from . import __version__
from .attacks import (
    AttackReport,
    calibrated_detector,
    cache_template,
    recover_upper_nibbles,
    slice_map_system,
    spy_keystrokes,
    write_slice_csv,
    write_template_csv,
)
from .cache_model import CYCLES_PER_SECOND, NOISE_PROFILES, PRESETS, CacheConfig, MemorySystem, load_config
from .covert import ChannelConfig, transmit
from .detector import (
    DEFAULT_K_M,
    DEFAULT_K_R,
    DetectorConfig,
    classify_trace,
    read_counter_trace,
    write_classifications,
    write_counter_trace,
)
from .errors import (
    CacheSideError,
    CalibrationError,
    ConfigError,
    HardwareUnavailableError,
    InfeasibleConfigError,
    MappingError,
    TransmissionError,
)
from .probes import SimulatedBackend, Technique, calibrate, write_histogram_csv
from .scheduler import Scheduler
from .victims import WORKLOADS, AesTTableVictim, KeystrokeVictim, parse_key, read_schedule_csv

log = logging.getLogger("cacheside")

EXIT_OK, EXIT_USAGE, EXIT_CALIBRATION, EXIT_INCONCLUSIVE = 0, 1, 2, 3
PRESET_ENV = "CACHESIDE_PRESET"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


# ------------------------------------------------------------------ helpers
def build_config(args) -> CacheConfig:
    base = {}
    if args.config:
        base = load_config(args.config).to_mapping()
        base.pop("slice_masks", None)
    preset = args.preset or os.environ.get(PRESET_ENV) or "haswell"
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
    over = {k: v for k, v in base.items() if k not in ("latencies",)}
    lat = dict(base.get("latencies", {}))
    if not args.config or args.preset:
        lat.update(PRESETS[preset])
    over["latencies"] = lat
    over.pop("levels", None)
    if args.noise:
        over.update(NOISE_PROFILES[args.noise])
    if args.jitter is not None:
        over["jitter_bound"] = args.jitter
    if args.constant_time_flush:
        over["constant_time_flush"] = True
    if args.prefetcher:
        over["prefetcher"] = True
    over["seed"] = args.seed
    levels = base.get("levels")
    cfg = CacheConfig.preset("haswell", **over) if levels is None else CacheConfig.preset("haswell", levels=tuple(map(tuple, levels)), **over)
    return cfg


def header(args, cfg: CacheConfig, **extra):
    lat = cfg.latencies
    h = {
        "command": args.command,
        "seed": args.seed,
        "preset": args.preset or os.environ.get(PRESET_ENV) or "haswell",
        "noise": args.noise or "quiet",
        "line_size": cfg.line_size,
        "levels": " ".join(f"{lv.ways}x{lv.sets}" for lv in cfg.levels),
        "n_slices": cfg.n_slices,
        "jitter_bound": cfg.jitter_bound,
        "spike_rate": cfg.spike_rate,
        "spike_bound": cfg.spike_bound,
        "ambient_rate": cfg.ambient_rate,
        "constant_time_flush": cfg.constant_time_flush,
        "prefetcher": cfg.prefetcher,
    }
    for name in ("l1_hit", "l2_hit", "l3_local_hit", "l3_remote_penalty", "dram", "flush_miss",
                 "flush_hit_delta", "flush_remote_penalty"):
        h[f"latency.{name}"] = getattr(lat, name)
    h["cycles_per_second"] = CYCLES_PER_SECOND
    h["invented"] = "base latencies, slice hash, noise model, cycles_per_second"
    h.update(extra)
    return h


def write_output(path, body: str, hdr: dict):
    text = "".join(f"# {k}={v}\n" for k, v in hdr.items()) + body
    if path in (None, "-"):
        return text
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text


def emit(summary):
    print(json.dumps(summary, sort_keys=True, default=str))


def local_line(system, core, start=0x5000_0000):
    """First line at or after ``start`` that maps to ``core``'s local slice."""
    addr = start
    while system.slice_of(addr) != system.local_slice(core):
        addr += system.config.line_size
    return addr


def _report_csv(report: AttackReport):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("key", "value"))
    for k, v in report.summary().items():
        if k == "scores":
            continue
        w.writerow((k, v if not isinstance(v, list) else " ".join(map(str, v))))
    return buf.getvalue()


# ------------------------------------------------------------- subcommands
def cmd_calibrate(args):
    cfg = build_config(args)
    tech = Technique.parse(args.technique)
    if tech is Technique.PP:
        raise UsageError("calibrate supports ff and fr; Prime+Probe thresholds are calibrated per eviction set")
    backend = helper = None
    source = "simulator"
    if args.backend == "hw":
        try:
            from .hw_timing import HardwareBackend, HwBackendConfig

            backend = HardwareBackend(HwBackendConfig(args.hw_file or sys.executable, core=args.core))
            addr = backend.region.address(args.hw_offset)
            source = "hardware"
        except HardwareUnavailableError as exc:
            log.warning("hardware backend unavailable (%s); falling back to the simulator", exc)
    if backend is None:
        system = MemorySystem(cfg)
        system.register("prober", args.core)
        system.register("helper", (args.core + 1) % cfg.n_cores)
        backend = SimulatedBackend(system, "prober")
        helper = SimulatedBackend(system, "helper") if tech is Technique.FR else None
        addr = args.addr if args.addr is not None else local_line(system, args.core)
    thr = calibrate(backend, addr, args.rounds, tech.value, helper=helper)
    buf = io.StringIO()
    write_histogram_csv(buf, thr)
    hdr = header(args, cfg, technique=tech.value, backend=source, addr=f"{addr:#x}", rounds=args.rounds)
    write_output(args.output, buf.getvalue(), hdr)
    emit({
        "seed": args.seed, "technique": tech.value, "backend": source, "boundary": thr.boundary_,
        "active_mean": round(thr.active_mean_, 4), "idle_mean": round(thr.idle_mean_, 4), "gap": thr.gap,
        "accuracy": thr.train_accuracy_, "histogram": args.output,
    })
    return EXIT_OK


def _message(args):
    if args.message == "-":
        return sys.stdin.buffer.read()
    if args.message:
        with open(args.message, "rb") as fh:
            return fh.read()
    return random.Random(args.seed).randbytes(args.size)


def cmd_covert(args):
    cfg = build_config(args)
    chan = ChannelConfig.build(args.technique, args.packet_size, cache_config=cfg,
                               slot_probes=args.slot_probes, max_retransmits=args.max_retransmits)
    message = _message(args)
    code = EXIT_OK
    try:
        metrics = transmit(chan, message)
    except TransmissionError as exc:
        log.error("%s", exc)
        metrics, code = exc.metrics, EXIT_INCONCLUSIVE
    summary = metrics.summary()
    summary.update(seed=args.seed, receiver_misses=metrics.receiver_counters.cache_misses,
                   receiver_refs=metrics.receiver_counters.cache_references)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "value"))
    for k, v in summary.items():
        w.writerow((k, v))
    write_output(args.output, buf.getvalue(), header(args, cfg, technique=chan.technique.value))
    if args.hexdump:
        summary["received_hex"] = metrics.delivered.hex()
    emit(summary)
    return code


SCENARIOS = (
    [f"covert-{t}" for t in ("ff", "fr", "pp")]
    + [f"aes-{t}" for t in ("ff", "fr", "pp")]
    + [f"keylog-{t}" for t in ("ff", "fr", "pp")]
    + [f"benign-{w}" for w in WORKLOADS]
)


def _live_trace(name, cfg, seed, interval):
    """Run one scenario and sample its attacker's cumulative counters."""
    kind, tech = name.split("-", 1)
    rows = []
    system = MemorySystem(cfg)
    if kind == "benign":
        actor = tech
        system.register(actor, 0, WORKLOADS[tech][1])
        sampler = _Sampler(system, actor, interval, rows)
        sched = Scheduler(system).add(actor, WORKLOADS[tech][0](system, actor)).observe(sampler)
        sched.run(max_steps=40_000)
    else:
        actor = "receiver" if kind == "covert" else "attacker"
        sampler = _Sampler(system, actor, interval, rows)
        if kind == "covert":
            n = 5 if tech == "pp" else 28
            chan = ChannelConfig.build(tech, n, cache_config=cfg)
            transmit(chan, random.Random(seed).randbytes(256), system, observers=[sampler])
        elif kind == "aes":
            key = random.Random(seed).randbytes(16)
            recover_upper_nibbles(tech, AesTTableVictim(key), system, seed=seed, observers=[sampler])
        else:
            victim = KeystrokeVictim.scripted(100, seed=seed, noise_rate=2.6e-7)
            spy_keystrokes(tech, victim.hot_addresses[:1], system, victim, observers=[sampler])
    sampler.final()
    return rows


class _Sampler:
    """Scheduler observer recording an actor's cumulative counters every
    ``interval`` cycles, starting once the actor exists."""

    def __init__(self, system, actor, interval, rows):
        self.system, self.actor, self.interval, self.rows = system, actor, interval, rows
        self.next = None

    def __call__(self, sched=None):
        now = self.system.current_time
        if self.next is None:
            self.next = now + self.interval
            return
        if now < self.next:
            return
        while self.next <= now:
            self.next += self.interval
        self.rows.append((self.actor, now, self.system.read_counters(self.actor)))

    def final(self):
        s = self.system.read_counters(self.actor)
        if not self.rows or self.rows[-1][2] != s:
            self.rows.append((self.actor, self.system.current_time, s))


def cmd_detect(args):
    cfg = build_config(args)
    if args.trace:
        with open(args.trace) as fh:
            trace = read_counter_trace(fh.read())
        source = args.trace
    else:
        rows = _live_trace(args.live_sim, cfg, args.seed, args.interval)
        if args.dump_trace:
            buf = io.StringIO()
            write_counter_trace(buf, rows)
            write_output(args.dump_trace, buf.getvalue(), header(args, cfg, scenario=args.live_sim))
        trace = {}
        for actor, cycle, s in rows:
            trace.setdefault(str(actor), []).append((cycle, s))
        source = args.live_sim
    if args.recalibrate:
        det = calibrated_detector(cfg, seed=args.seed)
        k_m, k_r = float(det.k_m), float(det.k_r)
    else:
        k_m, k_r = args.k_m, args.k_r
    dcfg = DetectorConfig(k_m, k_r, args.interval)
    rows = classify_trace(dcfg, trace, whole_run=args.whole_run)
    buf = io.StringIO()
    write_classifications(buf, rows)
    write_output(args.output, buf.getvalue(),
                 header(args, cfg, source=source, k_m=f"{k_m:.6f}", k_r=f"{k_r:.6f}", whole_run=args.whole_run))
    verdicts = sorted({c.verdict.value for *_, c in rows})
    overall = classify_trace(dcfg, trace, whole_run=True)
    emit({
        "seed": args.seed, "source": source, "k_m": round(k_m, 6), "k_r": round(k_r, 6),
        "windows": len(rows), "verdicts": verdicts,
        "whole_run": {a: {"verdict": c.verdict.value, "normalized_refs": round(c.normalized_refs, 6),
                          "normalized_misses": round(c.normalized_misses, 6)} for a, _, c in overall},
    })
    return EXIT_OK


def cmd_aes(args):
    cfg = build_config(args)
    key = parse_key(args.key) if args.key else random.Random(args.seed).randbytes(16)
    system = MemorySystem(cfg)
    victim = AesTTableVictim(key, full_rounds=not args.first_round_only)
    report = recover_upper_nibbles(args.technique, victim, system, margin=args.margin, lines=args.lines,
                                   budget=args.budget, seed=args.seed)
    hdr = header(args, cfg, technique=report.technique, key=key.hex())
    write_output(args.output, _report_csv(report), hdr)
    if args.template:
        tsys = MemorySystem(cfg)
        matrix = cache_template(args.technique, AesTTableVictim(key, full_rounds=not args.first_round_only),
                                tsys, args.template_encryptions, seed=args.seed)
        buf = io.StringIO()
        write_template_csv(buf, matrix)
        write_output(args.template, buf.getvalue(), hdr)
    out = report.summary()
    out.pop("scores", None)
    out.update(seed=args.seed, key=key.hex(), expected_hex="".join(f"{b >> 4:x}" for b in key))
    emit(out)
    return EXIT_OK if report.success else EXIT_INCONCLUSIVE


def cmd_keylog(args):
    cfg = build_config(args)
    if args.schedule:
        with open(args.schedule) as fh:
            schedule = read_schedule_csv(fh.read())
        victim = KeystrokeVictim(KeystrokeVictim.scripted(1).hot_addresses, schedule,
                                 noise_rate=args.noise_rate, seed=args.seed)
    else:
        victim = KeystrokeVictim.scripted(args.events, seed=args.seed, noise_rate=args.noise_rate)
    system = MemorySystem(cfg)
    report = spy_keystrokes(args.technique, victim.hot_addresses[:args.addresses], system, victim)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("event", "time_cycles", "kind"))
    for i, t in enumerate(victim.ground_truth):
        w.writerow((i, t, "truth"))
    for i, t in enumerate(report.recovered):
        w.writerow((i, t, "reported"))
    write_output(args.output, buf.getvalue(), header(args, cfg, technique=report.technique, addresses=args.addresses))
    out = report.summary()
    out.update(seed=args.seed)
    emit(out)
    return EXIT_OK


def cmd_slice_map(args):
    cfg = build_config(args)
    system = MemorySystem(cfg)
    rng = random.Random(args.seed)
    addrs = [rng.randrange(cfg.address_space // cfg.line_size) * cfg.line_size for _ in range(args.count)]
    mapping = slice_map_system(system, addrs, args.reps)
    correct = sum(system.slice_of(a) == s for a, s in mapping.items())
    buf = io.StringIO()
    write_slice_csv(buf, mapping)
    write_output(args.output, buf.getvalue(), header(args, cfg, reps=args.reps, count=args.count))
    emit({"seed": args.seed, "addresses": len(mapping), "matches_slice_function": correct})
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or key=value config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help=f"microarchitecture preset (env {PRESET_ENV})")
    common.add_argument("--noise", choices=sorted(NOISE_PROFILES), help="timing/traffic noise profile")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jitter", type=int, help="uniform timing jitter bound in cycles")
    common.add_argument("--constant-time-flush", action="store_true", help="countermeasure: clflush in constant time")
    common.add_argument("--prefetcher", action="store_true", help="enable the next-line prefetcher model")
    common.add_argument("-o", "--output", help="CSV output path (default: none)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="cacheside", description="Flush+Flush, Flush+Reload and Prime+Probe on a simulated cache.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    c = sub.add_parser("calibrate", parents=[common], help="flush/reload latency histogram and threshold")
    c.add_argument("--technique", choices=["ff", "fr"], default="ff")
    c.add_argument("--rounds", type=int, default=1000)
    c.add_argument("--addr", type=lambda s: int(s, 0))
    c.add_argument("--core", type=int, default=0)
    c.add_argument("--backend", choices=["sim", "hw"], default="sim")
    c.add_argument("--hw-file", help="file to map read-only for the hardware backend")
    c.add_argument("--hw-offset", type=int, default=0)
    c.set_defaults(func=cmd_calibrate)

    c = sub.add_parser("covert", parents=[common], help="run the packetised covert channel")
    c.add_argument("--technique", choices=["ff", "fr", "pp"], default="ff")
    c.add_argument("--packet-size", type=int, default=28)
    c.add_argument("--message", help="message file ('-' for stdin); default random bytes")
    c.add_argument("--size", type=int, default=1024, help="size of the default random message")
    c.add_argument("--slot-probes", type=int, default=3)
    c.add_argument("--max-retransmits", type=int, default=32)
    c.add_argument("--hexdump", action="store_true", help="include the received payload as hex")
    c.set_defaults(func=cmd_covert)

    c = sub.add_parser("detect", parents=[common], help="classify counter traces as benign or malicious")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--trace", help="CSV: actor,cycle,refs,misses,itlb_ra,itlb_wa,instr")
    g.add_argument("--live-sim", choices=SCENARIOS)
    c.add_argument("--k-m", type=float, default=DEFAULT_K_M)
    c.add_argument("--k-r", type=float, default=DEFAULT_K_R)
    c.add_argument("--recalibrate", action="store_true", help="fit thresholds on the simulated workload battery")
    c.add_argument("--interval", type=int, default=1_000_000, help="sampling interval in cycles")
    c.add_argument("--whole-run", action="store_true")
    c.add_argument("--dump-trace", help="write the live scenario's counter trace here")
    c.set_defaults(func=cmd_detect)

    c = sub.add_parser("aes-attack", parents=[common], help="recover the upper key nibbles of T-table AES")
    c.add_argument("--technique", choices=["ff", "fr", "pp"], default="ff")
    c.add_argument("--key", help="32 hex digits; default random from the seed")
    c.add_argument("--lines", type=int, default=1, help="lines monitored per table (>1 is ff only)")
    c.add_argument("--margin", type=float, default=0.05)
    c.add_argument("--budget", type=int, default=100_000, help="encryptions per key byte")
    c.add_argument("--first-round-only", action="store_true")
    c.add_argument("--template", help="write the cache-template CSV here")
    c.add_argument("--template-encryptions", type=int, default=50)
    c.set_defaults(func=cmd_aes)

    c = sub.add_parser("keylog-sim", parents=[common], help="spy on simulated keystrokes")
    c.add_argument("--technique", choices=["ff", "fr", "pp"], default="ff")
    c.add_argument("--addresses", type=int, choices=[1, 2, 3], default=1)
    c.add_argument("--events", type=int, default=1000)
    c.add_argument("--noise-rate", type=float, default=2.6e-7, help="spurious touches per hot address per cycle")
    c.add_argument("--schedule", help="CSV with a time_cycles column")
    c.set_defaults(func=cmd_keylog)

    c = sub.add_parser("slice-map", parents=[common], help="map addresses to LLC slices via flush timing")
    c.add_argument("--count", type=int, default=1000)
    c.add_argument("--reps", type=int, default=1)
    c.set_defaults(func=cmd_slice_map)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cacheside: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CalibrationError, InfeasibleConfigError, MappingError) as exc:
        print(f"cacheside: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (ConfigError, OSError, ValueError) as exc:
        print(f"cacheside: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CacheSideError as exc:
        print(f"cacheside: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION


if __name__ == "__main__":
    sys.exit(main())
