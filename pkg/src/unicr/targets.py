"""Correctness supervision: exact/executed indicators and the graded factual surrogate."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DegenerateEvidence, InvalidSignal

LABEL_KINDS = ("exact", "executed", "graded")


@dataclass(frozen=True)
class CorrectnessLabel:
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in LABEL_KINDS:
            raise InvalidSignal(f"unknown label kind {self.kind!r}")
        v = float(self.value)
        if not 0.0 <= v <= 1.0:
            raise InvalidSignal(f"label value {v} outside [0, 1]")
        if self.kind != "graded" and v not in (0.0, 1.0):
            raise InvalidSignal(f"{self.kind} label must be 0 or 1, got {v}")
        object.__setattr__(self, "value", v)

    @property
    def is_binary(self) -> bool:
        return self.value in (0.0, 1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_dict(cls, data: dict) -> "CorrectnessLabel":
        if set(data) != {"kind", "value"}:
            raise InvalidSignal(f"label needs exactly kind and value, got {sorted(data)}")
        return cls(data["kind"], data["value"])


def exact_label(match: bool) -> CorrectnessLabel:
    return CorrectnessLabel("exact", 1.0 if match else 0.0)


def executed_label(passed: bool) -> CorrectnessLabel:
    return CorrectnessLabel("executed", 1.0 if passed else 0.0)


def factual_surrogate(claims) -> CorrectnessLabel:
    """Graded correctness from per-claim entailment.

    Contradicted claims contribute zero but stay in the denominator, so the
    score is the mean over *all* claims of ``entailment * (not contradicted)``.
    No salience filter is applied here.
    """
    claims = list(claims)
    if not claims:
        raise DegenerateEvidence("factual surrogate needs at least one claim")
    total = sum(0.0 if c.contradicted else c.entailment for c in claims)
    value = min(1.0, max(0.0, total / len(claims)))
    return CorrectnessLabel("graded", value)
