"""Monotone post-calibration map fitted by pool-adjacent-violators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientData, InvalidSignal


@dataclass(frozen=True)
class IsotonicMap:
    """Piecewise-linear, non-decreasing map on [0, 1], clamped at the ends."""

    breakpoints: tuple[tuple[float, float], ...]

    def __post_init__(self):
        bp = tuple((float(x), float(y)) for x, y in self.breakpoints)
        if not bp:
            raise InvalidSignal("isotonic map needs at least one breakpoint")
        xs = [x for x, _ in bp]
        ys = [y for _, y in bp]
        if any(b < a for a, b in zip(xs, xs[1:])) or any(b < a for a, b in zip(ys, ys[1:])):
            raise InvalidSignal("isotonic breakpoints must be non-decreasing")
        object.__setattr__(self, "breakpoints", bp)

    @classmethod
    def identity(cls) -> "IsotonicMap":
        return cls(((0.0, 0.0), (1.0, 1.0)))

    def __call__(self, c):
        xs = np.array([x for x, _ in self.breakpoints])
        ys = np.array([y for _, y in self.breakpoints])
        out = np.interp(c, xs, ys)
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {"breakpoints": [list(p) for p in self.breakpoints]}

    @classmethod
    def from_dict(cls, data: dict) -> "IsotonicMap":
        return cls(tuple(tuple(p) for p in data["breakpoints"]))


def pav(y, w) -> np.ndarray:
    """Weighted least-squares non-decreasing fit to the sequence ``y``."""
    vals: list[float] = []
    wts: list[float] = []
    sizes: list[int] = []
    for yi, wi in zip(y, w):
        vals.append(float(yi))
        wts.append(float(wi))
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            wt = wts[-2] + wts[-1]
            v = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / wt
            size = sizes[-2] + sizes[-1]
            del vals[-1], wts[-1], sizes[-1]
            vals[-1], wts[-1], sizes[-1] = v, wt, size
    return np.repeat(vals, sizes)


def fit_isotonic(confidences, labels) -> IsotonicMap:
    c = np.asarray(confidences, dtype=float)
    r = np.asarray([getattr(l, "value", l) for l in labels], dtype=float)
    if c.size < 2:
        raise InsufficientData("isotonic fit needs at least two points")
    if c.shape != r.shape:
        raise ValueError("confidences and labels differ in length")
    xs, inverse, counts = np.unique(c, return_inverse=True, return_counts=True)
    ymean = np.bincount(inverse, weights=r) / counts
    fitted = np.clip(pav(ymean, counts), 0.0, 1.0)
    points = []
    for i, (x, y) in enumerate(zip(xs, fitted)):
        # keep only block end points; interior points of a flat block are redundant
        first = i == 0 or fitted[i - 1] != y
        last = i == len(xs) - 1 or fitted[i + 1] != y
        if first or last:
            points.append((float(x), float(y)))
    return IsotonicMap(tuple(points))
