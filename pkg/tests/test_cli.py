import json

import pytest

from cacheside import __version__
from cacheside.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_bad_arguments_exit_1(capsys):
    with pytest.raises(SystemExit) as info:
        main(["calibrate", "--rounds", "many"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 1


@pytest.mark.parametrize("preset,gap", [("haswell", 12), ("ivybridge", 9)])
def test_calibrate(capsys, tmp_path, preset, gap):
    path = tmp_path / "hist.csv"
    code, out, _ = run(capsys, "calibrate", "--preset", preset, "--rounds", "200", "-o", str(path))
    assert code == 0 and out["gap"] == gap and out["accuracy"] == 1.0
    text = path.read_text()
    assert f"# preset={preset}" in text and "# series=idle" in text


def test_preset_from_environment(capsys, monkeypatch):
    monkeypatch.setenv("CACHESIDE_PRESET", "ivybridge")
    code, out, _ = run(capsys, "calibrate", "--rounds", "200")
    assert out["gap"] == 9


def test_calibrate_constant_time_exits_2(capsys):
    code, _, err = run(capsys, "calibrate", "--constant-time-flush", "--rounds", "200")
    assert code == 2 and "overlap" in err


def test_calibrate_rejects_pp(capsys):
    with pytest.raises(SystemExit) as info:
        main(["calibrate", "--technique", "pp"])
    assert info.value.code == 1


def test_covert(capsys, tmp_path):
    code, out, _ = run(capsys, "covert", "--technique", "fr", "--packet-size", "8", "--size", "64",
                       "--hexdump", "-o", str(tmp_path / "c.csv"))
    assert code == 0 and out["ok"] and out["error_rate"] == 0
    assert len(out["received_hex"]) == 128


def test_covert_message_file(capsys, tmp_path):
    msg = tmp_path / "msg.bin"
    msg.write_bytes(b"attack at dawn")
    code, out, _ = run(capsys, "covert", "--message", str(msg), "--hexdump")
    assert bytes.fromhex(out["received_hex"]) == b"attack at dawn"


def test_covert_pp_large_packet_exits_2(capsys):
    code, _, err = run(capsys, "covert", "--technique", "pp", "--packet-size", "28")
    assert code == 2 and "GiB" in err


def test_covert_constant_time_fails_calibration(capsys):
    code, _, err = run(capsys, "covert", "--constant-time-flush", "--size", "16")
    assert code == 2 and "overlap" in err


def test_detect_trace_file(capsys, tmp_path):
    trace = tmp_path / "t.csv"
    trace.write_text("actor,cycle,refs,misses,itlb_ra,itlb_wa,instr\n"
                     "spy,100,514,514,100,0,100\nspy,200,1028,1028,200,0,200\nbrowser,100,1,0,500,0,500\n")
    out_csv = tmp_path / "v.csv"
    code, out, _ = run(capsys, "detect", "--trace", str(trace), "-o", str(out_csv))
    assert code == 0
    assert out["whole_run"]["spy"]["verdict"] == "malicious"
    assert out["whole_run"]["browser"]["verdict"] == "benign"
    assert "spy,100,malicious,5.140000,5.140000" in out_csv.read_text()


def test_detect_live(capsys, tmp_path):
    dump = tmp_path / "trace.csv"
    code, out, _ = run(capsys, "detect", "--live-sim", "benign-streaming", "--recalibrate",
                       "--dump-trace", str(dump))
    assert code == 0 and out["verdicts"] == ["benign"]
    code, again, _ = run(capsys, "detect", "--trace", str(dump), "--recalibrate")
    assert again["whole_run"] == out["whole_run"]


def test_aes_attack(capsys, tmp_path):
    key = "00112233445566778899aabbccddeeff"
    code, out, _ = run(capsys, "aes-attack", "--technique", "fr", "--key", key, "--first-round-only",
                       "--template", str(tmp_path / "tpl.csv"), "--template-encryptions", "2")
    assert code == 0 and out["recovered_hex"] == "0123456789abcdef"
    assert (tmp_path / "tpl.csv").read_text().count("\n") > 16


def test_aes_attack_budget_exit_3(capsys):
    code, out, _ = run(capsys, "aes-attack", "--technique", "fr", "--budget", "16")
    assert code == 3 and not out["success"]


def test_keylog(capsys, tmp_path):
    sched = tmp_path / "s.csv"
    sched.write_text("time_cycles\n10000\n200000\n450000\n")
    code, out, _ = run(capsys, "keylog-sim", "--technique", "fr", "--schedule", str(sched), "--noise-rate", "0")
    assert code == 0 and out["matched"] == 3 and out["accuracy"] == 1.0


def test_slice_map(capsys, tmp_path):
    code, out, _ = run(capsys, "slice-map", "--count", "40", "-o", str(tmp_path / "m.csv"))
    assert code == 0 and out["matches_slice_function"] == 40
    code, _, err = run(capsys, "slice-map", "--count", "5", "--constant-time-flush")
    assert code == 2 and "single out" in err


def test_config_file(capsys, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("jitter_bound = 0\nlatencies.flush_hit_delta = 20\n")
    code, out, _ = run(capsys, "calibrate", "--config", str(cfg), "--rounds", "200")
    assert out["gap"] == 20


def test_missing_config_file(capsys, tmp_path):
    code, _, err = run(capsys, "calibrate", "--config", str(tmp_path / "nope.json"))
    assert code == 1
