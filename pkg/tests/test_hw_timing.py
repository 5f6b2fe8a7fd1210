import pytest

from cacheside import hw_timing
from cacheside.errors import AddressError, HardwareUnavailableError

needs_hw = pytest.mark.skipif(not hw_timing.supported(), reason="x86-64 Linux with a C compiler required")


def test_source_uses_fenced_timestamps():
    src = hw_timing.C_SOURCE
    assert "_mm_clflush" in src and "__rdtscp" in src and "_mm_mfence" in src


@needs_hw
def test_hardware_backend_times_flushes(tmp_path):
    path = tmp_path / "shared.bin"
    path.write_bytes(bytes(1 << 16))
    try:
        backend = hw_timing.HardwareBackend(hw_timing.HwBackendConfig(str(path)))
    except HardwareUnavailableError as exc:
        pytest.skip(str(exc))
    with backend:
        addr = backend.region.address(0)
        backend.plain_access(addr)
        backend.serialize()
        assert backend.timed_flush(addr) > 0
        assert backend.timed_access(addr) > 0
        with pytest.raises(AddressError):
            backend.timed_flush(addr + (1 << 20))
        with pytest.raises(AddressError):
            backend.region.address(1 << 16)


@needs_hw
def test_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    with pytest.raises(HardwareUnavailableError):
        hw_timing.HardwareBackend(hw_timing.HwBackendConfig(str(path)))
