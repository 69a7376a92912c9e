"""Reported calibration metrics (hard-binned; see ``objective`` for the
differentiable training surrogates)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

N_BINS = 15
EPS = 1e-12


def label_values(labels) -> np.ndarray:
    """Accept CorrectnessLabel objects or plain numbers."""
    vals = [getattr(l, "value", l) for l in labels]
    return np.asarray(vals, dtype=float)


def _pair(confidences, labels):
    c = np.asarray(confidences, dtype=float).ravel()
    r = label_values(labels).ravel()
    if c.shape != r.shape:
        raise ValueError(f"{c.size} confidences vs {r.size} labels")
    return c, r


def brier(confidences, labels) -> float:
    c, r = _pair(confidences, labels)
    return float(np.mean((c - r) ** 2))


def nll(confidences, labels) -> float:
    c, r = _pair(confidences, labels)
    c = np.clip(c, EPS, 1 - EPS)
    return float(-np.mean(r * np.log(c) + (1 - r) * np.log1p(-c)))


def bin_indices(confidences, scheme="fixed15") -> np.ndarray:
    """Bin id per sample. ``fixed15``: equal width on [0, 1];
    ``adaptive15``: equal mass, edges at the empirical quantiles, so tied
    confidences always share a bin."""
    c = np.asarray(confidences, dtype=float)
    if scheme in ("fixed15", "fixed"):
        return np.minimum(np.floor(c * N_BINS).astype(int), N_BINS - 1).clip(0)
    if scheme in ("adaptive15", "adaptive"):
        if c.size == 0:
            return np.zeros(0, dtype=int)
        edges = np.quantile(c, np.arange(1, N_BINS) / N_BINS)
        return np.searchsorted(edges, c, side="left")
    raise ValueError(f"unknown binning scheme {scheme!r}")


class ReliabilityBin(NamedTuple):
    mean_conf: float
    frac_correct: float
    count: int


def reliability_data(confidences, labels, bins="fixed15") -> list[ReliabilityBin]:
    c, r = _pair(confidences, labels)
    idx = bin_indices(c, bins)
    out = []
    for b in range(N_BINS):
        m = idx == b
        n = int(m.sum())
        if n:
            out.append(ReliabilityBin(float(c[m].mean()), float(r[m].mean()), n))
    return out


def ece(confidences, labels, scheme="fixed15") -> float:
    c, r = _pair(confidences, labels)
    if c.size == 0:
        raise ValueError("ece needs at least one sample")
    return float(sum(b.count * abs(b.mean_conf - b.frac_correct)
                     for b in reliability_data(c, r, scheme)) / c.size)


@dataclass
class CalibrationMetricsReport:
    nll: float
    brier: float
    ece_fixed: float
    ece_adaptive: float
    reliability_bins: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"nll": self.nll, "brier": self.brier, "ece_fixed": self.ece_fixed,
                "ece_adaptive": self.ece_adaptive,
                "reliability_bins": [b._asdict() for b in self.reliability_bins]}


def calibration_report(confidences, labels) -> CalibrationMetricsReport:
    return CalibrationMetricsReport(
        nll=nll(confidences, labels),
        brier=brier(confidences, labels),
        ece_fixed=ece(confidences, labels, "fixed15"),
        ece_adaptive=ece(confidences, labels, "adaptive15"),
        reliability_bins=reliability_data(confidences, labels, "fixed15"),
    )


def selective_loss(confidences, labels, tau, kappa, beta) -> float:
    """High-confidence error rate plus a coverage-shortfall penalty."""
    c, r = _pair(confidences, labels)
    answered = c >= tau
    cov = answered.mean() if c.size else 0.0
    return float(np.mean(answered * (1 - r)) + beta * max(0.0, kappa - cov))


def huber(x, delta):
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


def coverage_smoothing_penalty(confidences, tau, delta) -> float:
    """Huber of the empirical confidence density in ``[tau-delta, tau+delta]``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    c = np.asarray(confidences, dtype=float)
    if c.size == 0:
        return 0.0
    density = np.count_nonzero(np.abs(c - tau) <= delta) / (c.size * 2 * delta)
    return float(huber(density, delta))
