"""Differentiable training terms.

Each term takes confidences ``c`` (and labels) and returns ``(value, dvalue/dc)``
so the head can chain them through the sigmoid. Cross-entropy is the exception:
it is computed from logits for numerical stability.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .metrics import N_BINS

SABS_EPS = 1e-4


def bce_from_logits(s, r):
    """Mean Bernoulli cross-entropy; graded ``r`` acts as a soft target."""
    n = s.size
    value = np.mean(np.logaddexp(0.0, s) - r * s)
    return float(value), (expit(s) - r) / n


def _sabs(x):
    root = np.sqrt(x * x + SABS_EPS ** 2)
    return root - SABS_EPS, x / root


def soft_bin_weights(c, n_bins=N_BINS):
    """Triangular-kernel soft assignment of samples to equal-mass bins.

    Position is the mid-rank quantile of each confidence, so the weights are
    piecewise constant in ``c`` and carry no gradient themselves.
    """
    n = c.size
    ranks = np.empty(n)
    ranks[np.argsort(c, kind="stable")] = np.arange(n)
    u = (ranks + 0.5) / n
    centers = (np.arange(n_bins) + 0.5) / n_bins
    w = np.maximum(0.0, 1.0 - np.abs(u[:, None] - centers[None, :]) * n_bins)
    return w / w.sum(axis=1, keepdims=True)


def soft_adaptive_ece(c, r, n_bins=N_BINS):
    """Sum over soft bins of |mean(c - r)| weighted by bin mass."""
    w = soft_bin_weights(c, n_bins)
    gaps = w.T @ (c - r) / c.size
    vals, dv = _sabs(gaps)
    return float(vals.sum()), (w @ dv) / c.size


def smooth_selective_loss(c, r, tau, kappa, beta, sharpness=0.02, hinge_k=50.0):
    """Smoothed high-confidence-error plus coverage-shortfall term.

    The answer indicator becomes ``sigmoid((c - tau)/sharpness)`` and the hinge
    ``max(0, x)`` becomes ``softplus(k x)/k``.
    """
    n = c.size
    g = expit((c - tau) / sharpness)
    dg = g * (1 - g) / sharpness
    cov = g.mean()
    x = hinge_k * (kappa - cov)
    shortfall = np.logaddexp(0.0, x) / hinge_k
    value = np.mean(g * (1 - r)) + beta * shortfall
    grad = dg * ((1 - r) / n - beta * expit(x) / n)
    return float(value), grad


def smooth_coverage_penalty(c, tau, delta, sharpness=0.01):
    """Huber of a soft-window density estimate near ``tau``."""
    n = c.size
    d = c - tau
    a = expit((delta - d) / sharpness)
    b = expit((delta + d) / sharpness)
    w = a * b
    dw = a * b * (-(1 - a) + (1 - b)) / sharpness
    density = w.sum() / (n * 2 * delta)
    ddens = dw / (n * 2 * delta)
    if density <= delta:
        return float(0.5 * density ** 2), density * ddens
    return float(delta * (density - 0.5 * delta)), delta * ddens
