"""Selective-prediction evaluation and synthetic data with known ground truth."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError
from .head import HeadConfig, fit_head, predict_batch
from .metrics import brier, ece, label_values, nll, reliability_data
from .records import ClaimScore, RawSignalsRecord, SampleRecord, VerifierFlag
from .risk import (ThresholdPolicy, conformal_threshold, selective_risk_at, soft_conformal_threshold,
                   validation_threshold)
from .targets import exact_label


# --------------------------------------------------------------------------
# risk-coverage analysis

class RCPoint(NamedTuple):
    tau: float
    coverage: float
    risk: float


@dataclass(frozen=True)
class RCCurve:
    points: tuple[RCPoint, ...]  # decreasing coverage

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "coverage", "risk"])
        for p in self.points:
            w.writerow([repr(p.tau), repr(p.coverage), repr(p.risk)])
        return buf.getvalue()


def rc_curve(confidences, labels) -> RCCurve:
    """Exact empirical curve: one point per distinct confidence threshold."""
    c = np.asarray(confidences, dtype=float)
    r = label_values(labels)
    if c.size == 0:
        raise ValueError("rc_curve needs at least one example")
    order = np.argsort(-c, kind="stable")
    cs = c[order]
    loss = np.cumsum(1.0 - r[order])
    count = np.arange(1, c.size + 1)
    ends = np.flatnonzero(np.r_[cs[1:] != cs[:-1], True])
    pts = [RCPoint(float(cs[i]), float(count[i] / c.size), float(loss[i] / count[i])) for i in ends]
    return RCCurve(tuple(reversed(pts)))


def aurc(curve: RCCurve) -> float:
    """Area under the risk-coverage curve.

    Risk is a right-continuous step in coverage: on ``(cov_prev, cov]`` it equals
    the risk of the point at ``cov``, and the lowest-coverage risk extends down
    to 0. With distinct confidences this is the mean prefix error rate.
    """
    if not curve.points:
        raise ValueError("empty curve")
    pts = sorted(curve.points, key=lambda p: p.coverage)
    area, prev = 0.0, 0.0
    for p in pts:
        area += (p.coverage - prev) * p.risk
        prev = p.coverage
    return area


def coverage_at_risk(curve: RCCurve, rho: float) -> float:
    ok = [p.coverage for p in curve.points if p.risk <= rho]
    return max(ok) if ok else 0.0


def bootstrap_violation_rate(confidences, labels, policy, alpha, B=1000, seed=0,
                             evidence_coverage=None) -> float:
    """Fraction of bootstrap resamples whose selective risk under ``policy``
    exceeds ``alpha``. ``policy`` is a ThresholdPolicy or a bare threshold."""
    if B < 100:
        raise ValueError("use at least 100 bootstrap resamples")
    c = np.asarray(confidences, dtype=float)
    r = label_values(labels)
    if isinstance(policy, ThresholdPolicy):
        covs = [None] * c.size if evidence_coverage is None else list(evidence_coverage)
        taus = np.array([policy.tau_for(v) for v in covs])
    else:
        taus = np.full(c.size, float(policy))
    return answered_violation_rate(c >= taus, r, alpha, B, seed)


def answered_violation_rate(answered, labels, alpha, B=1000, seed=0) -> float:
    answered = np.asarray(answered, dtype=bool)
    loss = (1.0 - label_values(labels)) * answered
    n = answered.size
    if n == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(B):
        counts = np.bincount(rng.integers(0, n, n), minlength=n)
        k = counts @ answered
        if k and (counts @ loss) / k > alpha:
            violations += 1
    return violations / B


def reliability_csv(confidences, labels, bins="fixed15") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mean_conf", "frac_correct", "count"])
    for b in reliability_data(confidences, labels, bins):
        w.writerow([repr(b.mean_conf), repr(b.frac_correct), b.count])
    return buf.getvalue()


def summary(confidences, labels, answered=None, rho=0.05, alpha=0.05, B=1000, seed=0) -> dict:
    c = np.asarray(confidences, dtype=float)
    r = label_values(labels)
    curve = rc_curve(c, r)
    out = {"n": int(c.size), "ece": ece(c, r, "fixed15"), "ece_adaptive": ece(c, r, "adaptive15"),
           "brier": brier(c, r), "nll": nll(c, r), "aurc": aurc(curve),
           "coverage_at_risk": coverage_at_risk(curve, rho), "rho": rho}
    if answered is not None:
        answered = np.asarray(answered, dtype=bool)
        k = int(answered.sum())
        out["coverage"] = k / c.size if c.size else 0.0
        out["selective_risk"] = float(np.sum((1 - r)[answered]) / k) if k else 0.0
        out["violation_rate"] = answered_violation_rate(answered, r, alpha, B, seed)
        out["alpha"] = alpha
    return out


# --------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "mean_shift"    # mean_shift: features move along -w/|w|; link_shift: intercept drops
    magnitude: float = 0.5

    def __post_init__(self):
        if self.kind not in ("mean_shift", "link_shift"):
            raise ConfigError(f"unknown shift kind {self.kind!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian features with a logistic correctness link."""

    n: int = 1000
    weights: tuple[float, ...] = (2.0, -1.5, 1.0, 0.5)
    bias: float = 1.5
    feature_mean: tuple[float, ...] | None = None
    feature_scale: float = 1.0
    shift: ShiftSpec | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.feature_mean is not None:
            object.__setattr__(self, "feature_mean", tuple(float(m) for m in self.feature_mean))
            if len(self.feature_mean) != len(self.weights):
                raise ConfigError("feature_mean length must match weights")
        if isinstance(self.shift, dict):
            object.__setattr__(self, "shift", ShiftSpec(**self.shift))
        if self.n < 0 or self.feature_scale <= 0:
            raise ConfigError("n must be >= 0 and feature_scale > 0")

    @property
    def d(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"synthetic spec: unknown keys {sorted(unknown)}")
        return cls(**data)


class SyntheticDraw(NamedTuple):
    X: np.ndarray
    p: np.ndarray
    r: np.ndarray


def _params(spec: SyntheticSpec, shifted: bool):
    w = np.asarray(spec.weights)
    mean = np.zeros(spec.d) if spec.feature_mean is None else np.asarray(spec.feature_mean)
    bias = spec.bias
    if shifted and spec.shift is not None:
        if spec.shift.kind == "mean_shift":
            mean = mean - spec.shift.magnitude * w / np.linalg.norm(w)
        else:
            bias = bias - spec.shift.magnitude
    return w, mean, bias


def sample_synthetic(spec: SyntheticSpec, rng=None, n=None, shifted=False) -> SyntheticDraw:
    """Feature-level draw: ``X``, true correctness probability ``p``, labels ``r``."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.n if n is None else n
    w, mean, bias = _params(spec, shifted)
    X = mean + spec.feature_scale * rng.standard_normal((n, spec.d))
    p = expit(X @ w + bias)
    r = (rng.random(n) < p).astype(float)
    return SyntheticDraw(X, p, r)


def _record_from_latent(i, z, p, correct, rng, prefix):
    z = np.r_[z, np.zeros(max(0, 4 - z.size))]
    # z0 -> sequence likelihood
    bar_ell = float(np.log(expit(z[0] + 1.0)))
    u = rng.gamma(4.0, size=8)
    logprobs = tuple(float(v) for v in bar_ell * u / u.mean())
    entropies = tuple(float(-v * (1.0 + 0.1 * e)) for v, e in zip(logprobs, rng.random(8)))
    # z1 -> self-consistency: more agreement as z1 decreases
    k = 5
    agree = 1 + rng.binomial(k - 1, expit(-z[1]))
    keys = ["A"] * agree + [rng.choice(["B", "C", "D"]) for _ in range(k - agree)]
    samples = []
    for a in keys:
        sim = tuple(1.0 if a == b else 0.2 for b in keys)
        ent = tuple(0.9 if a == b else 0.1 for b in keys)
        samples.append(SampleRecord(a, sim, ent, verifier_pass=bool(a == "A" and rng.random() < expit(z[3] + 1))))
    # z2 -> retrieval support of claims
    claims = []
    for _ in range(4):
        e = float(rng.beta(1 + 4 * expit(z[2]), 1 + 4 * expit(-z[2])))
        con = float(np.clip(1.0 - e + 0.2 * rng.standard_normal(), 0.0, 1.0))
        claims.append(ClaimScore(e, con >= 0.5, True, e, con))
    # z3 -> tool checks
    flags = tuple(VerifierFlag(bool(rng.random() < expit(z[3] + 1.0))) for _ in range(2))
    tool_diag = float(expit(z[3] + 0.3 * rng.standard_normal()))
    return RawSignalsRecord(
        id=f"{prefix}{i:06d}", token_logprobs=logprobs, token_entropies=entropies, samples=tuple(samples),
        claims=tuple(claims), verifier_flags=flags, tool_diag=tool_diag, label=exact_label(bool(correct)),
        debug={"true_p": float(p)},
    )


def generate_synthetic(spec: SyntheticSpec, shifted: bool = False, prefix: str = "syn-") -> list[RawSignalsRecord]:
    """Record-level draw. Latent coordinates 0-3 drive, respectively, token
    log-probs, sample agreement, claim support and tool checks; the true
    probability is kept in ``record.debug['true_p']``."""
    if spec.n == 0:
        return []
    rng = np.random.default_rng(spec.seed)
    draw = sample_synthetic(spec, rng, shifted=shifted)
    sig_rng = np.random.default_rng([spec.seed, 1])
    return [_record_from_latent(i, draw.X[i], draw.p[i], draw.r[i], sig_rng, prefix) for i in range(spec.n)]


# --------------------------------------------------------------------------
# Monte Carlo validity experiment

@dataclass(frozen=True)
class ValiditySpec:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    trials: int = 1000
    calibration_size: int = 500
    test_size: int = 500
    train_size: int = 5000
    alpha: float = 0.05
    smoothing: str = "none"
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "ValiditySpec":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"simulation spec: unknown keys {sorted(unknown)}")
        data = dict(data)
        if "synthetic" in data:
            data["synthetic"] = SyntheticSpec.from_dict(data["synthetic"])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def _method_summary(risks, coverages, alpha):
    risks = np.asarray(risks)
    return {"mean_risk": float(risks.mean()), "std_risk": float(risks.std()),
            "violation_rate": float(np.mean(risks > alpha)),
            "mean_coverage": float(np.mean(coverages))}


def simulate_validity(spec: ValiditySpec) -> dict:
    """Repeated calibrate/test draws from one synthetic distribution.

    A logistic head is fitted once on a separate training draw. Each trial
    draws fresh calibration and test sets (both from the shifted distribution
    when a shift is configured), sets thresholds on the calibration set and
    records the test selective risk. The validation threshold baseline is
    fitted on an unshifted calibration draw.
    """
    t0 = time.perf_counter()
    syn = spec.synthetic
    root = np.random.SeedSequence(spec.seed)
    train_seq, *trial_seqs = root.spawn(spec.trials + 1)
    train = sample_synthetic(syn, np.random.default_rng(train_seq), n=spec.train_size)
    head = fit_head(train.X, train.r, HeadConfig(seed=spec.seed))
    shifted = syn.shift is not None

    res = {k: ([], []) for k in ("conformal", "soft_conformal", "validation_preshift")}
    for seq in trial_seqs:
        rng = np.random.default_rng(seq)
        cal = sample_synthetic(syn, rng, n=spec.calibration_size, shifted=shifted)
        test = sample_synthetic(syn, rng, n=spec.test_size, shifted=shifted)
        c_cal = predict_batch(head, None, cal.X)
        c_test = predict_batch(head, None, test.X)
        taus = {"conformal": conformal_threshold(c_cal, cal.r, spec.alpha, spec.smoothing),
                "soft_conformal": soft_conformal_threshold(c_cal, cal.r, spec.alpha)}
        pre = sample_synthetic(syn, rng, n=spec.calibration_size, shifted=False) if shifted else cal
        taus["validation_preshift"] = validation_threshold(predict_batch(head, None, pre.X), pre.r, spec.alpha)
        for name, tau in taus.items():
            sr = selective_risk_at(c_test, test.r, tau)
            res[name][0].append(sr.risk)
            res[name][1].append(sr.coverage)

    report = {
        "spec": spec.to_dict(),
        "alpha": spec.alpha,
        "trials": spec.trials,
        "shifted": shifted,
        "methods": {k: _method_summary(v[0], v[1], spec.alpha) for k, v in res.items()},
        "runtime_seconds": time.perf_counter() - t0,
    }
    return report
