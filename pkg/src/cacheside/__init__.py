"""Cache timing side channels on a deterministic simulated cache hierarchy.

Flush+Flush, Flush+Reload and Prime+Probe probes, a packetised covert
channel, a performance-counter detector and end-to-end attacks (T-table AES,
keystroke timing, slice mapping).
"""
from .cache_model import CacheConfig, CounterSample, MemorySystem
from .covert import ChannelConfig, crc16, decode_packet, encode_packet, transmit
from .detector import CounterThresholdDetector, DetectorConfig, classify, calibrate_thresholds
from .probes import EvictionSet, Technique, Threshold, calibrate, ff_probe, fr_probe, pp_probe, pp_prime
from .scheduler import Scheduler

__version__ = "0.1.0"

__all__ = [
    "CacheConfig",
    "ChannelConfig",
    "CounterSample",
    "CounterThresholdDetector",
    "DetectorConfig",
    "EvictionSet",
    "MemorySystem",
    "Scheduler",
    "Technique",
    "Threshold",
    "calibrate",
    "calibrate_thresholds",
    "classify",
    "crc16",
    "decode_packet",
    "encode_packet",
    "ff_probe",
    "fr_probe",
    "pp_prime",
    "pp_probe",
    "transmit",
]
