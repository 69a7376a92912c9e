"""Risk-controlled refusal: turning confidences into answer/abstain thresholds.

Answering always means ``confidence >= tau``. ``ABSTAIN_ALWAYS`` is a
threshold no confidence in [0, 1] can reach.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InsufficientData, InvalidSignal
from .metrics import label_values

ABSTAIN_ALWAYS = float(np.nextafter(1.0, 2.0))
POLICY_MODES = ("validation", "conformal", "conformal_bucketed")
SMOOTHING = ("none", "interpolated")
MIN_BUCKET_SIZE = 30
_INT_TOL = 1e-9

NO_ERRORS_OBSERVED = "no_errors_observed"
ZERO_COVERAGE = "zero_coverage"
ABSTAIN_ALWAYS_FLAG = "abstain_always"


def _arrays(confidences, labels):
    c = np.asarray(confidences, dtype=float).ravel()
    r = label_values(labels).ravel()
    if c.shape != r.shape:
        raise ValueError(f"{c.size} confidences vs {r.size} labels")
    return c, r


# --------------------------------------------------------------------------
# selective risk

@dataclass(frozen=True)
class SelectiveOutcomeSet:
    confidences: tuple
    labels: tuple
    answered_mask: tuple

    def __post_init__(self):
        if not len(self.confidences) == len(self.labels) == len(self.answered_mask):
            raise ValueError("outcome set fields differ in length")


class SelectiveRisk(NamedTuple):
    risk: float
    coverage: float
    zero_coverage: bool = False


def selective_risk(outcomes: SelectiveOutcomeSet) -> SelectiveRisk:
    r = label_values(outcomes.labels)
    answered = np.asarray(outcomes.answered_mask, dtype=bool)
    return _risk_from_mask(answered, r)


def _risk_from_mask(answered, r) -> SelectiveRisk:
    n = answered.size
    k = int(answered.sum())
    if k == 0:
        return SelectiveRisk(0.0, 0.0, True)
    return SelectiveRisk(float(np.sum((1 - r)[answered]) / k), k / n, False)


def selective_risk_at(confidences, labels, tau) -> SelectiveRisk:
    c, r = _arrays(confidences, labels)
    return _risk_from_mask(c >= tau, r)


def bayes_threshold(lam: float) -> float:
    """Answer iff P(correct) >= 1 - lambda, the expected-loss-minimizing rule."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("abstention cost must lie in [0, 1]")
    return 1.0 - lam


# --------------------------------------------------------------------------
# validation threshold

def _descending_sweep(c, r):
    """Distinct thresholds in decreasing order with answered count and loss sum."""
    order = np.argsort(-c, kind="stable")
    cs = c[order]
    loss = np.cumsum(1.0 - r[order])
    count = np.arange(1, c.size + 1)
    last_of_group = np.r_[cs[1:] != cs[:-1], True]
    return cs[last_of_group], count[last_of_group], loss[last_of_group]


def validation_threshold(confidences, labels, rho: float) -> float:
    """Threshold with the largest calibration coverage whose empirical
    selective risk is at most ``rho``; smaller tau wins ties."""
    c, r = _arrays(confidences, labels)
    if c.size == 0:
        raise InsufficientData("validation threshold needs at least one example")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    taus, count, loss = _descending_sweep(c, r)
    feasible = loss / count <= rho + _INT_TOL
    if not feasible.any():
        return ABSTAIN_ALWAYS
    best = np.flatnonzero(feasible).max()
    # tau = 0 answers everything, same coverage as the smallest observed confidence
    if count[best] == c.size:
        return 0.0
    return float(taus[best])


# --------------------------------------------------------------------------
# conformal thresholds

def conformal_threshold(confidences, labels, alpha: float, smoothing: str = "none") -> float:
    """Split-conformal threshold from the confidences of calibration errors.

    With ``n`` errors sorted by confidence, tau is the ``ceil((1-alpha)(n+1))``-th
    smallest error confidence (clamped to ``n``), so an exchangeable new error
    clears the threshold with probability at most ``alpha``. ``interpolated``
    blends the floor and ceil order statistics. No errors gives ``0.0``.
    """
    c, r = _arrays(confidences, labels)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if smoothing not in SMOOTHING:
        raise ConfigError(f"unknown smoothing {smoothing!r}")
    if np.any((r != 0.0) & (r != 1.0)):
        raise InvalidSignal("conformal_threshold needs binary labels; use soft_conformal_threshold")
    errors = np.sort(c[r == 0.0])
    n = errors.size
    if n == 0:
        return 0.0
    h = (1.0 - alpha) * (n + 1)
    if smoothing == "none":
        k = min(max(math.ceil(h - _INT_TOL), 1), n)
        return float(errors[k - 1])
    lo = min(max(math.floor(h + _INT_TOL), 1), n)
    hi = min(max(math.ceil(h - _INT_TOL), 1), n)
    frac = 0.0 if hi == lo else h - math.floor(h)
    return float(errors[lo - 1] + frac * (errors[hi - 1] - errors[lo - 1]))


def soft_conformal_threshold(confidences, labels, alpha: float) -> float:
    """Graded-loss threshold: the smallest candidate tau with
    ``(sum_i L_i(tau) + 1) / (m + 1) <= alpha * coverage(tau)``, where
    ``L_i = 1{c_i >= tau} (1 - r_i)``."""
    c, r = _arrays(confidences, labels)
    m = c.size
    if m == 0:
        raise InsufficientData("soft conformal threshold needs calibration data")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    taus, count, loss = _descending_sweep(c, r)
    ok = (loss + 1.0) / (m + 1) <= alpha * count / m + _INT_TOL
    if not ok.any():
        return ABSTAIN_ALWAYS
    best = np.flatnonzero(ok).max()
    if count[best] == m:
        return 0.0
    return float(taus[best])


# --------------------------------------------------------------------------
# policies

@dataclass(frozen=True)
class Bucket:
    name: str
    low: float
    high: float
    tau: float
    size: int = 0
    inherited: bool = False

    def contains(self, x: float) -> bool:
        return self.low <= x < self.high or (self.high >= 1.0 and x >= self.high)

    def to_dict(self) -> dict:
        return {"name": self.name, "low": self.low, "high": self.high, "tau": self.tau,
                "size": self.size, "inherited": self.inherited}

    @classmethod
    def from_dict(cls, data: dict) -> "Bucket":
        return cls(**data)


@dataclass(frozen=True)
class ThresholdPolicy:
    mode: str
    alpha_or_rho: float
    calibration_size: int
    global_tau: float | None = None
    buckets: tuple[Bucket, ...] | None = None
    smoothing: str = "none"
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ConfigError(f"unknown policy mode {self.mode!r}")
        if self.smoothing not in SMOOTHING:
            raise ConfigError(f"unknown smoothing {self.smoothing!r}")
        if self.mode == "validation":
            if not 0.0 <= self.alpha_or_rho <= 1.0:
                raise ConfigError("rho must lie in [0, 1]")
        elif not 0.0 < self.alpha_or_rho < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        bucketed = self.mode == "conformal_bucketed"
        if bucketed != (self.buckets is not None) or bucketed == (self.global_tau is not None):
            raise ConfigError("exactly one of global_tau / buckets must be set for this mode")
        if bucketed:
            edges = [(b.low, b.high) for b in self.buckets]
            if edges[0][0] != 0.0 or edges[-1][1] != 1.0 or any(a[1] != b[0] for a, b in zip(edges, edges[1:])):
                raise ConfigError("bucket predicates must partition [0, 1]")

    def bucket_for(self, coverage: float | None = None, hint: str | None = None) -> Bucket | None:
        if self.buckets is None:
            return None
        if hint is not None:
            for b in self.buckets:
                if b.name == hint:
                    return b
        if coverage is None:
            raise InvalidSignal("bucketed policy needs the evidence coverage feature")
        for b in self.buckets:
            if b.contains(coverage):
                return b
        raise InvalidSignal(f"coverage {coverage} falls in no bucket")

    def tau_for(self, coverage: float | None = None, hint: str | None = None) -> float:
        if self.buckets is None:
            return float(self.global_tau)
        return self.bucket_for(coverage, hint).tau

    @property
    def abstains_always(self) -> bool:
        taus = [self.global_tau] if self.buckets is None else [b.tau for b in self.buckets]
        return all(t > 1.0 for t in taus)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "alpha_or_rho": self.alpha_or_rho,
                "calibration_size": self.calibration_size, "global_tau": self.global_tau,
                "buckets": None if self.buckets is None else [b.to_dict() for b in self.buckets],
                "smoothing": self.smoothing, "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, data: dict) -> "ThresholdPolicy":
        buckets = data.get("buckets")
        return cls(mode=data["mode"], alpha_or_rho=data["alpha_or_rho"],
                   calibration_size=data["calibration_size"], global_tau=data.get("global_tau"),
                   buckets=None if buckets is None else tuple(Bucket.from_dict(b) for b in buckets),
                   smoothing=data.get("smoothing", "none"), flags=tuple(data.get("flags", ())))


def _is_binary(r):
    return bool(np.all((r == 0.0) | (r == 1.0)))


def _conformal_any(c, r, alpha, smoothing):
    """Hard conformal rule for binary labels, soft rule for graded ones."""
    flags = []
    if _is_binary(r):
        if not np.any(r == 0.0):
            flags.append(NO_ERRORS_OBSERVED)
        tau = conformal_threshold(c, r, alpha, smoothing)
    else:
        tau = soft_conformal_threshold(c, r, alpha)
    if tau > 1.0:
        flags.append(ABSTAIN_ALWAYS_FLAG)
    return tau, flags


def bucket_ranges(bucket_edges: Sequence[float]) -> list[tuple[str, float, float]]:
    edges = [0.0, *sorted(float(e) for e in bucket_edges), 1.0]
    if any(not 0.0 < e < 1.0 for e in edges[1:-1]) or len(set(edges)) != len(edges):
        raise ConfigError(f"bucket edges must be distinct values in (0, 1): {list(bucket_edges)}")
    return [(f"cov[{lo:g},{hi:g}{']' if hi == 1.0 else ')'}", lo, hi) for lo, hi in zip(edges, edges[1:])]


def bucketed_conformal(confidences, labels, evidence_coverage, alpha: float,
                       bucket_edges: Sequence[float] = (0.5,), smoothing: str = "none",
                       min_bucket_size: int = MIN_BUCKET_SIZE) -> ThresholdPolicy:
    """Separate conformal thresholds per evidence-coverage bucket; buckets
    with fewer than ``min_bucket_size`` points inherit the global threshold."""
    c, r = _arrays(confidences, labels)
    cov = np.asarray(evidence_coverage, dtype=float).ravel()
    if c.size == 0:
        raise InsufficientData("bucketed conformal needs calibration data")
    if cov.shape != c.shape:
        raise ValueError("evidence coverage must align with confidences")
    global_tau, flags = _conformal_any(c, r, alpha, smoothing)
    buckets = []
    for name, lo, hi in bucket_ranges(bucket_edges):
        m = (cov >= lo) & ((cov < hi) | (hi >= 1.0))
        size = int(m.sum())
        if size < min_bucket_size:
            buckets.append(Bucket(name, lo, hi, global_tau, size, inherited=True))
            continue
        tau, bflags = _conformal_any(c[m], r[m], alpha, smoothing)
        flags += [f"{name}:{f}" for f in bflags]
        buckets.append(Bucket(name, lo, hi, tau, size))
    return ThresholdPolicy(mode="conformal_bucketed", alpha_or_rho=alpha, calibration_size=int(c.size),
                           buckets=tuple(buckets), smoothing=smoothing, flags=tuple(flags))


def build_policy(mode, confidences, labels, level, evidence_coverage=None, bucket_edges=(0.5,),
                 smoothing="none", min_bucket_size=MIN_BUCKET_SIZE) -> ThresholdPolicy:
    c, r = _arrays(confidences, labels)
    if mode == "validation":
        tau = validation_threshold(c, r, level)
        flags = (ABSTAIN_ALWAYS_FLAG,) if tau > 1.0 else ()
        return ThresholdPolicy("validation", level, int(c.size), global_tau=tau, flags=flags)
    if mode == "conformal":
        tau, flags = _conformal_any(c, r, level, smoothing)
        return ThresholdPolicy("conformal", level, int(c.size), global_tau=tau, smoothing=smoothing,
                               flags=tuple(flags))
    if mode in ("conformal_bucketed", "bucketed"):
        if evidence_coverage is None:
            raise ConfigError("bucketed mode needs retrieval coverage features (enable the rag family)")
        return bucketed_conformal(c, r, evidence_coverage, level, bucket_edges, smoothing, min_bucket_size)
    raise ConfigError(f"unknown policy mode {mode!r}")


# --------------------------------------------------------------------------
# learn-then-test split

class Split(NamedTuple):
    train: list
    tune: list
    calibrate: list


def ltt_split(records: Sequence, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Split:
    """Seeded partition into disjoint train / tune / calibration splits."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(records)
    n_tune = int(round(fractions[1] * n))
    n_cal = int(round(fractions[2] * n))
    n_train = n - n_tune - n_cal
    if min(n_train, n_tune, n_cal) < 1:
        raise InsufficientData(f"{n} records cannot fill three non-empty splits")
    perm = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: [records[i] for i in sorted(idx)]
    return Split(pick(perm[:n_train]), pick(perm[n_train:n_train + n_tune]), pick(perm[n_train + n_tune:]))
