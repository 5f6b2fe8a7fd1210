import io
import random

import pytest

from cacheside.attacks import (
    Spy,
    cache_template,
    calibrated_detector,
    detector_battery,
    map_slices,
    recover_upper_nibbles,
    score_events,
    slice_map_system,
    spy_keystrokes,
    stop_rule,
    write_slice_csv,
    write_template_csv,
)
from cacheside.cache_model import CacheConfig, MemorySystem
from cacheside.detector import classify
from cacheside.errors import ConfigError, MappingError
from cacheside.probes import SimulatedBackend
from cacheside.victims import AesTTableVictim, KeystrokeVictim


def test_stop_rule():
    scores = [0] * 16
    scores[3], scores[7] = 21, 20
    assert stop_rule(scores, 0.05) == (3, 21, 20, True)
    scores[3] = 20
    assert stop_rule(scores, 0.05)[3] is False
    scores[3] = 20.5
    assert stop_rule(scores, 0.05)[3] is False
    assert stop_rule([1] + [0] * 15, 0.05)[3] is True


def test_score_events():
    truth = [100, 200, 300]
    assert score_events(truth, [105, 211, 299, 301], 10) == (2, 2, 0.0)
    assert score_events(truth, [100, 205, 305], 10) == (3, 0, 1.0)
    assert score_events(truth, [150], 10) == (0, 1, 0.0)
    assert score_events([], [1], 10) == (0, 1, 0.0)


@pytest.mark.parametrize("tech", ["ff", "fr"])
def test_aes_first_round_quiet(tech):
    key = random.Random(1).randbytes(16)
    rep = recover_upper_nibbles(tech, AesTTableVictim(key, full_rounds=False), MemorySystem(CacheConfig()))
    assert rep.success
    assert rep.recovered == [b >> 4 for b in key]
    assert rep.details["recovered_hex"] == "".join(f"{b >> 4:x}" for b in key)


def test_aes_budget_exhaustion_is_inconclusive():
    key = random.Random(1).randbytes(16)
    rep = recover_upper_nibbles("fr", AesTTableVictim(key), MemorySystem(CacheConfig()), budget=16)
    assert not rep.success
    assert rep.details["inconclusive"]


def test_aes_multi_line_only_for_ff():
    with pytest.raises(ConfigError):
        recover_upper_nibbles("fr", AesTTableVictim(bytes(16)), MemorySystem(CacheConfig()), lines=2)


def test_cache_template_diagonal():
    key = bytes([0x3C] + [0] * 15)
    m = cache_template("fr", AesTTableVictim(key, full_rounds=False), MemorySystem(CacheConfig()), 5)
    for c in range(16):
        assert m[c][c ^ 3] == 5
    buf = io.StringIO()
    write_template_csv(buf, m)
    assert buf.getvalue().splitlines()[0].startswith("candidate,line0,line1")


def test_keystrokes_quiet():
    v = KeystrokeVictim.scripted(30, seed=3)
    rep = spy_keystrokes("fr", v.hot_addresses[:1], MemorySystem(CacheConfig()), v)
    assert rep.details["matched"] == 30 and rep.details["false_positives"] == 0
    with pytest.raises(ConfigError):
        spy_keystrokes("fr", [], MemorySystem(CacheConfig()), v)


def test_slice_mapping():
    s = MemorySystem(CacheConfig(jitter_bound=2))
    rng = random.Random(0)
    addrs = [rng.randrange(1 << 26) * 64 for _ in range(100)]
    mapping = slice_map_system(s, addrs, reps=3)
    assert all(mapping[a] == s.slice_of(a) for a in addrs)
    buf = io.StringIO()
    write_slice_csv(buf, {0x40: 1})
    assert buf.getvalue() == "addr,slice\n0x40,1\n"


def test_slice_mapping_fails_with_constant_time_flush():
    s = MemorySystem(CacheConfig(constant_time_flush=True))
    backends = []
    for c in range(4):
        s.register(f"c{c}", c)
        backends.append(SimulatedBackend(s, f"c{c}"))
    with pytest.raises(MappingError):
        map_slices(backends, [0x40])


def test_battery_separates():
    benign, malicious = detector_battery(CacheConfig(), steps=4000)
    assert set(benign) == {"streaming", "compute", "interactive"}
    assert set(malicious) == {"fr_spy", "hammer"}
    det = calibrated_detector(CacheConfig(), steps=4000)
    assert not any(classify(det, s).malicious for s in benign.values())
    assert all(classify(det, s).malicious for s in malicious.values())


def test_spy_calibration_leaves_counters_clean():
    s = MemorySystem(CacheConfig())
    s.register("attacker", 1)
    Spy("fr", s, "attacker", [0x5000_0000])
    assert s.read_counters("attacker").instructions == 0
