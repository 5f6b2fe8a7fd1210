"""Exception hierarchy shared by the simulator, probes and attack drivers."""


class CacheSideError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CacheSideError, ValueError):
    pass


class UnknownActorError(CacheSideError, KeyError):
    pass


class AddressError(CacheSideError, ValueError):
    pass


class CalibrationError(CacheSideError):
    """Two latency (or counter-ratio) populations cannot be separated."""


class ProbeMisuseError(CacheSideError, AssertionError):
    """A probe primitive was used outside its precondition (e.g. probe before prime)."""


class EvictionSetError(CacheSideError):
    pass


class InfeasibleConfigError(ConfigError):
    pass


class MappingError(CacheSideError):
    pass


class HardwareUnavailableError(CacheSideError, RuntimeError):
    pass


class TransmissionError(CacheSideError):
    """Raised when a packet exceeds its retransmission budget.

    ``metrics`` carries the partial channel metrics gathered so far.
    """

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = metrics


class ActorStepError(CacheSideError, RuntimeError):
    def __init__(self, actor, clock, cause):
        super().__init__(f"actor {actor!r} failed at cycle {clock}: {cause!r}")
        self.actor = actor
        self.clock = clock
