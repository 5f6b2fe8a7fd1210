"""Counter-based attack detection.

A process is flagged when its cache misses or cache references per ITLB
event (ITLB_RA + ITLB_WA) reach a threshold.  Tight attack loops have tiny
code footprints but heavy LLC traffic, so their ratios stand out.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_counter_matrix
from .cache_model import CounterSample
from .errors import CalibrationError, ConfigError

DEFAULT_K_M = 2.35
DEFAULT_K_R = 2.34

TRACE_FIELDS = ("actor", "cycle", "refs", "misses", "itlb_ra", "itlb_wa", "instr")
CLASSIFICATION_FIELDS = ("actor", "cycle", "verdict", "normalized_refs", "normalized_misses")


class Verdict(str, Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class DetectorConfig:
    k_m: float = DEFAULT_K_M
    k_r: float = DEFAULT_K_R
    sampling_interval: int = 1_000_000

    def __post_init__(self):
        if not (self.k_m > 0 and self.k_r > 0):
            raise ConfigError("k_m and k_r must be > 0")
        if self.sampling_interval <= 0:
            raise ConfigError("sampling_interval must be > 0")


@dataclass(frozen=True)
class Classification:
    verdict: Verdict
    normalized_refs: float
    normalized_misses: float

    @property
    def malicious(self):
        return self.verdict is Verdict.MALICIOUS


def ratios(sample):
    """(references, misses) per ITLB event, or None when no ITLB events."""
    itlb = sample.itlb_ra + sample.itlb_wa
    if itlb <= 0:
        return None
    return sample.cache_references / itlb, sample.cache_misses / itlb


def classify(cfg: DetectorConfig, sample: CounterSample) -> Classification:
    r = ratios(sample)
    if r is None:
        return Classification(Verdict.INDETERMINATE, float("nan"), float("nan"))
    refs, misses = r
    bad = misses >= cfg.k_m or refs >= cfg.k_r
    return Classification(Verdict.MALICIOUS if bad else Verdict.BENIGN, refs, misses)


def classify_ratios(cfg: DetectorConfig, normalized_refs, normalized_misses) -> Classification:
    bad = normalized_misses >= cfg.k_m or normalized_refs >= cfg.k_r
    return Classification(Verdict.MALICIOUS if bad else Verdict.BENIGN, normalized_refs, normalized_misses)


def _ratio_matrix(samples):
    X = check_counter_matrix(samples)
    itlb = X[:, 2] + X[:, 3]
    if np.any(itlb <= 0):
        raise CalibrationError("calibration samples need ITLB events")
    return X[:, 0] / itlb, X[:, 1] / itlb


def calibrate_thresholds(benign, malicious):
    """Per metric, the midpoint between the largest benign ratio and the
    smallest malicious ratio.  Returns ``(k_m, k_r)``."""
    benign, malicious = list(benign), list(malicious)
    if not benign or not malicious:
        raise CalibrationError("need at least one benign and one malicious sample")
    b_refs, b_miss = _ratio_matrix(benign)
    m_refs, m_miss = _ratio_matrix(malicious)
    out = {}
    for name, b, m in (("misses", b_miss, m_miss), ("references", b_refs, m_refs)):
        if m.min() <= b.max():
            raise CalibrationError(
                f"cache {name} per ITLB event overlap: malicious min {m.min():.4f} <= benign max {b.max():.4f}"
            )
        out[name] = (b.max() + m.min()) / 2
    return out["misses"], out["references"]


class CounterThresholdDetector(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: X rows are ``refs, misses, itlb_ra, itlb_wa``.

    ``k_m``/``k_r`` left as None are learnt by ``fit`` (label 1 = malicious)
    with the midpoint rule.  ``predict`` returns -1 for rows without ITLB
    events.
    """

    def __init__(self, k_m=None, k_r=None):
        self.k_m = k_m
        self.k_r = k_r

    def fit(self, X, y=None):
        X = check_counter_matrix(X)
        if self.k_m is None or self.k_r is None:
            if y is None:
                raise ValueError("labels are required to learn thresholds")
            y = np.asarray(y).astype(bool)
            km, kr = calibrate_thresholds(X[~y], X[y])
        else:
            km, kr = self.k_m, self.k_r
        self.k_m_ = float(self.k_m if self.k_m is not None else km)
        self.k_r_ = float(self.k_r if self.k_r is not None else kr)
        self.classes_ = np.array([0, 1])
        return self

    @property
    def config_(self):
        check_is_fitted(self, "k_m_")
        return DetectorConfig(self.k_m_, self.k_r_)

    def transform(self, X):
        """Normalised (refs, misses) per ITLB event; NaN where undefined."""
        X = check_counter_matrix(X)
        itlb = X[:, 2] + X[:, 3]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.column_stack([X[:, 0] / itlb, X[:, 1] / itlb])
        out[itlb <= 0] = np.nan
        return out

    def predict(self, X):
        check_is_fitted(self, "k_m_")
        R = self.transform(X)
        pred = ((R[:, 1] >= self.k_m_) | (R[:, 0] >= self.k_r_)).astype(int)
        pred[np.isnan(R[:, 0])] = -1
        return pred


class Monitor:
    """Scheduler observer that classifies per-window counter deltas.

    Every ``cfg.sampling_interval`` cycles the delta since the previous sample
    of each watched actor is classified and appended to ``records`` as
    ``(actor, cycle, Classification)``.
    """

    def __init__(self, system, actors, cfg: DetectorConfig):
        self.system = system
        self.actors = list(actors)
        for a in self.actors:
            system.actor(a)
        self.cfg = cfg
        self.records = []
        self._last = {a: system.read_counters(a) for a in self.actors}
        self._start = dict(self._last)
        self._next = system.current_time + cfg.sampling_interval

    def __call__(self, scheduler=None):
        now = self.system.current_time
        if now < self._next:
            return
        while self._next <= now:
            self._next += self.cfg.sampling_interval
        self.sample()

    def sample(self):
        now = self.system.current_time
        for a in self.actors:
            cur = self.system.read_counters(a)
            delta = cur - self._last[a]
            self._last[a] = cur
            self.records.append((a, now, classify(self.cfg, delta)))

    def flush(self):
        """Classify whatever accumulated since the last full window."""
        if any(self.system.read_counters(a) != self._last[a] for a in self.actors):
            self.sample()

    def whole_run(self):
        """Classification of each actor's counters since the monitor started."""
        return {a: classify(self.cfg, self.system.read_counters(a) - self._start[a]) for a in self.actors}

    def verdicts(self, actor):
        return [c.verdict for a, _, c in self.records if a == actor]


def monitor(system, actors, cfg: DetectorConfig, scheduler=None):
    """Attach a Monitor to ``scheduler`` (if given) and return it."""
    mon = Monitor(system, actors, cfg)
    if scheduler is not None:
        scheduler.observe(mon)
    return mon


def read_counter_trace(text):
    """Parse cumulative counter traces into per-actor lists of (cycle, sample)."""
    out = {}
    reader = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    missing = set(TRACE_FIELDS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"counter trace lacks columns {sorted(missing)}")
    for rec in reader:
        s = CounterSample(int(rec["refs"]), int(rec["misses"]), int(rec["itlb_ra"]), int(rec["itlb_wa"]), int(rec["instr"]))
        out.setdefault(rec["actor"], []).append((int(rec["cycle"]), s))
    return out


def write_counter_trace(fh, rows):
    """``rows`` are (actor, cycle, CounterSample) with cumulative counters."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for actor, cycle, s in rows:
        w.writerow((actor, cycle, s.cache_references, s.cache_misses, s.itlb_ra, s.itlb_wa, s.instructions))


def classify_trace(cfg: DetectorConfig, trace, whole_run=False):
    """Classify the deltas between consecutive cumulative samples of each actor
    (or, with ``whole_run``, the last sample of each actor)."""
    rows = []
    for actor in sorted(trace):
        prev = CounterSample()
        for cycle, s in trace[actor]:
            if not whole_run:
                rows.append((actor, cycle, classify(cfg, s - prev)))
            prev = s
        if whole_run and trace[actor]:
            rows.append((actor, trace[actor][-1][0], classify(cfg, prev)))
    return rows


def write_classifications(fh, rows):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CLASSIFICATION_FIELDS)
    for actor, cycle, c in rows:
        w.writerow((actor, cycle, c.verdict.value, f"{c.normalized_refs:.6f}", f"{c.normalized_misses:.6f}"))
