import io

import pytest

from cacheside.cache_model import CacheConfig, MemorySystem
from cacheside.victims import (
    CYCLES_PER_MS,
    WORKLOADS,
    AesTTableVictim,
    KeystrokeVictim,
    aes_first_round_lines,
    default_hot_addresses,
    parse_key,
    read_schedule_csv,
    run_keystrokes,
    run_workload,
    write_schedule_csv,
)


def test_first_round_lines():
    p = bytes(range(16))
    k = bytes([0xA5] * 16)
    lines = aes_first_round_lines(p, k)
    assert lines[0] == (0, 0xA5 >> 4)
    assert lines[5] == (1, (5 ^ 0xA5) >> 4)
    with pytest.raises(ValueError):
        aes_first_round_lines(b"x", k)


def test_victim_footprint_is_deterministic():
    v = AesTTableVictim(bytes(16))
    p = bytes(range(16))
    a = v.accessed_addresses(p)
    assert len(a) == 16 + 36
    assert a == v.accessed_addresses(p)
    assert a[:16] == [v.table_addr(i % 4, i) for i in range(16)]
    first = AesTTableVictim(bytes(16), full_rounds=False)
    assert len(first.accessed_addresses(p)) == 16


def test_victim_encrypt_touches_lines():
    s = MemorySystem(CacheConfig())
    s.register("victim", 0)
    key = bytes.fromhex("00112233445566778899aabbccddeeff")
    v = AesTTableVictim(key, full_rounds=False)
    v.encrypt(bytes(16), s)
    assert v.encryptions == 1
    for i in range(16):
        assert s.is_cached(v.line_addr(i % 4, key[i] >> 4), 3)


def test_parse_key():
    assert parse_key("0x" + "ab" * 16) == bytes([0xAB] * 16)
    with pytest.raises(ValueError):
        parse_key("abcd")


def test_keystroke_ground_truth():
    v = KeystrokeVictim.scripted(10, seed=1)
    assert len(v.schedule) == 10
    gaps = [b - a for a, b in zip(v.schedule, v.schedule[1:])]
    assert all(80 * CYCLES_PER_MS <= g <= 300 * CYCLES_PER_MS for g in gaps)
    s = MemorySystem(CacheConfig())
    s.register("victim", 0)
    truth = run_keystrokes(v, s)
    assert len(truth) == 10
    assert all(0 <= t - e < v.quantum for t, e in zip(truth, v.schedule))
    for a in v.hot_addresses:
        assert s.is_cached(a, 3)


def test_keystroke_noise_events():
    v = KeystrokeVictim.scripted(20, seed=2, noise_rate=1e-5)
    s = MemorySystem(CacheConfig())
    s.register("victim", 0)
    run_keystrokes(v, s)
    assert len(v.noise_events) > 0


def test_keystroke_validation():
    with pytest.raises(ValueError):
        KeystrokeVictim((), (1,))
    with pytest.raises(ValueError):
        KeystrokeVictim((0x40,), (5, 5))
    with pytest.raises(ValueError):
        KeystrokeVictim((0x40,), (5,), noise_rate=-1)


def test_hot_addresses_on_distinct_pages():
    addrs = default_hot_addresses(3)
    assert len({a // 4096 for a in addrs}) == 3


def test_schedule_csv_round_trip():
    buf = io.StringIO()
    write_schedule_csv(buf, (1, 20, 300))
    assert read_schedule_csv("# note\n" + buf.getvalue()) == (1, 20, 300)


@pytest.mark.parametrize("name", sorted(WORKLOADS))
def test_workloads_run(name):
    s = MemorySystem(CacheConfig())
    s.register(name, 0, WORKLOADS[name][1])
    delta = run_workload(s, name, name, 500, warmup=100)
    assert delta.cycles > 0
    if name in ("idle", "compute"):
        assert delta.cache_references == 0
