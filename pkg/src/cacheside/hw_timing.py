"""Real-hardware probe backend for x86-64 Linux.

A tiny C helper (compiled on first use with the system C compiler and loaded
through ctypes) provides fenced ``rdtsc`` timings around ``clflush`` and
loads.  Targets live in a read-only shared mapping of a file, as a spy would
map a shared library.  Nothing here is used by the simulator or the tests'
acceptance checks; unsupported machines get HardwareUnavailableError.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import hashlib
import mmap
import os
import platform
import shutil
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .errors import AddressError, HardwareUnavailableError

C_SOURCE = r"""
#include <stdint.h>
#include <x86intrin.h>

static inline uint64_t stamp(void) {
    unsigned int aux;
    return __rdtscp(&aux);
}

uint64_t hw_timed_flush(const void *p) {
    _mm_mfence();
    uint64_t start = stamp();
    _mm_clflush(p);
    _mm_mfence();
    uint64_t end = stamp();
    return end - start;
}

uint64_t hw_timed_access(const void *p) {
    _mm_mfence();
    uint64_t start = stamp();
    (void)*(volatile const uint8_t *)p;
    _mm_mfence();
    uint64_t end = stamp();
    return end - start;
}

void hw_access(const void *p) { (void)*(volatile const uint8_t *)p; }
void hw_flush(const void *p) { _mm_clflush(p); }
void hw_fence(void) { _mm_mfence(); }
"""

PROT_READ = 0x1
MAP_SHARED = 0x01


def supported() -> bool:
    try:
        _check_platform()
    except HardwareUnavailableError:
        return False
    return True


def _check_platform():
    if not sys.platform.startswith("linux"):
        raise HardwareUnavailableError(f"hardware timing needs Linux, not {sys.platform}")
    if platform.machine().lower() not in ("x86_64", "amd64"):
        raise HardwareUnavailableError(f"hardware timing needs x86-64, not {platform.machine()}")
    if _compiler() is None:
        raise HardwareUnavailableError("no C compiler (cc, gcc or clang) found")


def _compiler():
    for name in (os.environ.get("CC"), "cc", "gcc", "clang"):
        if name and shutil.which(name):
            return name
    return None


_LIB = None


def load_library():
    """Compile (once per source hash) and load the C helper."""
    global _LIB
    if _LIB is not None:
        return _LIB
    _check_platform()
    digest = hashlib.sha256(C_SOURCE.encode()).hexdigest()[:16]
    cache = Path(os.environ.get("CACHESIDE_BUILD_DIR", Path(tempfile.gettempdir()) / "cacheside-hw"))
    cache.mkdir(parents=True, exist_ok=True)
    so = cache / f"hwtiming-{digest}.so"
    if not so.exists():
        src = cache / f"hwtiming-{digest}.c"
        src.write_text(C_SOURCE)
        tmp = so.with_suffix(f".{os.getpid()}.tmp")
        cmd = [_compiler(), "-O2", "-shared", "-fPIC", "-o", str(tmp), str(src)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode:
            raise HardwareUnavailableError(f"building the timing helper failed: {proc.stderr.strip()}")
        os.replace(tmp, so)
    lib = ctypes.CDLL(str(so))
    for name in ("hw_timed_flush", "hw_timed_access"):
        getattr(lib, name).restype = ctypes.c_uint64
        getattr(lib, name).argtypes = [ctypes.c_void_p]
    for name in ("hw_access", "hw_flush"):
        getattr(lib, name).restype = None
        getattr(lib, name).argtypes = [ctypes.c_void_p]
    lib.hw_fence.restype = None
    lib.hw_fence.argtypes = []
    _LIB = lib
    return lib


@dataclass(frozen=True)
class HwBackendConfig:
    path: str
    size: int | None = None
    repetitions: int = 1000
    core: int | None = None


class SharedRegion:
    """Read-only MAP_SHARED mapping of a file, addressed by raw pointers."""

    def __init__(self, path, size=None):
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        libc.mmap.restype = ctypes.c_void_p
        libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_long]
        libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
        self._libc = libc
        fd = os.open(path, os.O_RDONLY)
        try:
            length = size or os.fstat(fd).st_size
            if length <= 0:
                raise HardwareUnavailableError(f"{path} is empty; nothing to map")
            addr = libc.mmap(None, length, PROT_READ, MAP_SHARED, fd, 0)
            if addr in (None, ctypes.c_void_p(-1).value):
                raise HardwareUnavailableError(f"mmap failed: {os.strerror(ctypes.get_errno())}")
        finally:
            os.close(fd)
        if addr % mmap.PAGESIZE:
            raise HardwareUnavailableError("mapping is not page aligned")
        self.base = addr
        self.size = length

    def address(self, offset):
        if not 0 <= offset < self.size:
            raise AddressError(f"offset {offset} outside the {self.size}-byte region")
        return self.base + offset

    def contains(self, addr):
        return self.base <= addr < self.base + self.size

    def close(self):
        if self.base:
            self._libc.munmap(self.base, self.size)
            self.base = 0


class HardwareBackend:
    """ProbeBackend on the real machine.  Addresses are absolute pointers
    inside the mapped region (use ``region.address(offset)``)."""

    def __init__(self, cfg: HwBackendConfig):
        self.cfg = cfg
        self.lib = load_library()
        if cfg.core is not None:
            try:
                os.sched_setaffinity(0, {cfg.core})
            except (OSError, AttributeError) as exc:
                raise HardwareUnavailableError(f"cannot pin to core {cfg.core}: {exc}") from exc
        self.region = SharedRegion(cfg.path, cfg.size)
        self.core = cfg.core
        self._primed = {}

    def _check(self, addr):
        if not self.region.contains(addr):
            raise AddressError(f"{addr:#x} is outside the mapped region")
        return addr

    def timed_flush(self, addr):
        return int(self.lib.hw_timed_flush(self._check(addr)))

    def timed_access(self, addr):
        return int(self.lib.hw_timed_access(self._check(addr)))

    def plain_access(self, addr):
        self.lib.hw_access(self._check(addr))

    def plain_flush(self, addr):
        self.lib.hw_flush(self._check(addr))

    def serialize(self):
        self.lib.hw_fence()

    def wait(self, cycles):
        # busy loop on the timestamp counter is not exposed; a fence suffices
        self.lib.hw_fence()

    def close(self):
        self.region.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def hw_timed_flush(backend: HardwareBackend, addr) -> int:
    return backend.timed_flush(addr)
