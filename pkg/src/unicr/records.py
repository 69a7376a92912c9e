"""Raw upstream signal records and their JSON-lines encoding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

from .errors import InvalidSignal
from .targets import CorrectnessLabel

SYMMETRY_TOL = 1e-6


def _unit(name, x):
    x = float(x)
    if not (0.0 <= x <= 1.0):
        raise InvalidSignal(f"{name}={x} outside [0, 1]")
    return x


def _check_keys(kind, data, allowed, required=()):
    if not isinstance(data, dict):
        raise InvalidSignal(f"{kind} must be an object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise InvalidSignal(f"{kind}: unknown fields {sorted(unknown)}")
    missing = [k for k in required if k not in data]
    if missing:
        raise InvalidSignal(f"{kind}: missing fields {missing}")


@dataclass(frozen=True)
class SampleRecord:
    answer_key: str
    embedding_sim: tuple[float, ...] | None = None
    entailment_pairs: tuple[float, ...] | None = None
    verifier_pass: bool | None = None

    def to_dict(self) -> dict:
        out: dict = {"answer_key": self.answer_key}
        if self.embedding_sim is not None:
            out["embedding_sim"] = list(self.embedding_sim)
        if self.entailment_pairs is not None:
            out["entailment_pairs"] = list(self.entailment_pairs)
        if self.verifier_pass is not None:
            out["verifier_pass"] = self.verifier_pass
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SampleRecord":
        _check_keys("sample", data, ("answer_key", "embedding_sim", "entailment_pairs", "verifier_pass"),
                    ("answer_key",))
        sim = data.get("embedding_sim")
        ent = data.get("entailment_pairs")
        return cls(
            answer_key=str(data["answer_key"]),
            embedding_sim=None if sim is None else tuple(_unit("embedding_sim", v) for v in sim),
            entailment_pairs=None if ent is None else tuple(_unit("entailment_pairs", v) for v in ent),
            verifier_pass=None if data.get("verifier_pass") is None else bool(data["verifier_pass"]),
        )


@dataclass(frozen=True)
class ClaimScore:
    entailment: float
    contradicted: bool = False
    salient: bool = True
    max_passage_entailment: float = 0.0
    contradiction_score: float = 0.0

    def __post_init__(self):
        for name in ("entailment", "max_passage_entailment", "contradiction_score"):
            object.__setattr__(self, name, _unit(name, getattr(self, name)))

    def to_dict(self) -> dict:
        return {
            "entailment": self.entailment,
            "contradicted": self.contradicted,
            "salient": self.salient,
            "max_passage_entailment": self.max_passage_entailment,
            "contradiction_score": self.contradiction_score,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClaimScore":
        _check_keys("claim", data, ("entailment", "contradicted", "salient", "max_passage_entailment",
                                    "contradiction_score"), ("entailment",))
        return cls(
            entailment=data["entailment"],
            contradicted=bool(data.get("contradicted", False)),
            salient=bool(data.get("salient", True)),
            max_passage_entailment=data.get("max_passage_entailment", data["entailment"]),
            contradiction_score=data.get("contradiction_score", 0.0),
        )


@dataclass(frozen=True)
class VerifierFlag:
    passed: bool
    score: float | None = None

    def to_dict(self) -> dict:
        out: dict = {"pass": self.passed}
        if self.score is not None:
            out["score"] = self.score
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "VerifierFlag":
        _check_keys("verifier flag", data, ("pass", "score"), ("pass",))
        score = data.get("score")
        return cls(bool(data["pass"]), None if score is None else _unit("verifier score", score))


@dataclass(frozen=True)
class RawSignalsRecord:
    """One example's upstream outputs. ``debug`` holds oracle-only data
    (e.g. the true correctness probability of synthetic records)."""

    id: str
    token_logprobs: tuple[float, ...] | None = None
    token_entropies: tuple[float, ...] | None = None
    samples: tuple[SampleRecord, ...] = ()
    claims: tuple[ClaimScore, ...] = ()
    verifier_flags: tuple[VerifierFlag, ...] | None = None
    tool_diag: float | None = None
    label: CorrectnessLabel | None = None
    bucket_hint: str | None = None
    debug: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.token_logprobs is not None:
            for v in self.token_logprobs:
                if not math.isfinite(v) or v > 0:
                    raise InvalidSignal(f"record {self.id}: token log-prob {v} must be finite and <= 0")
        if self.token_entropies is not None:
            for v in self.token_entropies:
                if not math.isfinite(v) or v < 0:
                    raise InvalidSignal(f"record {self.id}: token entropy {v} must be finite and >= 0")
        if self.tool_diag is not None:
            _unit("tool_diag", self.tool_diag)
        k = len(self.samples)
        for s in self.samples:
            for name in ("embedding_sim", "entailment_pairs"):
                row = getattr(s, name)
                if row is not None and len(row) != k:
                    raise InvalidSignal(f"record {self.id}: {name} row has length {len(row)}, expected K={k}")

    def with_updates(self, **changes) -> "RawSignalsRecord":
        return replace(self, **changes)

    def to_dict(self, include_debug: bool = False) -> dict:
        out: dict = {"id": self.id}
        if self.token_logprobs is not None:
            out["token_logprobs"] = list(self.token_logprobs)
        if self.token_entropies is not None:
            out["token_entropies"] = list(self.token_entropies)
        out["samples"] = [s.to_dict() for s in self.samples]
        out["claims"] = [c.to_dict() for c in self.claims]
        if self.verifier_flags is not None:
            out["verifier_flags"] = [f.to_dict() for f in self.verifier_flags]
        if self.tool_diag is not None:
            out["tool_diag"] = self.tool_diag
        if self.label is not None:
            out["label"] = self.label.to_dict()
        if self.bucket_hint is not None:
            out["bucket_hint"] = self.bucket_hint
        if include_debug and self.debug is not None:
            out["debug"] = dict(self.debug)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RawSignalsRecord":
        _check_keys("record", data, ("id", "token_logprobs", "token_entropies", "samples", "claims",
                                     "verifier_flags", "tool_diag", "label", "bucket_hint", "debug"), ("id",))
        lp = data.get("token_logprobs")
        ent = data.get("token_entropies")
        flags = data.get("verifier_flags")
        label = data.get("label")
        return cls(
            id=str(data["id"]),
            token_logprobs=None if lp is None else tuple(float(v) for v in lp),
            token_entropies=None if ent is None else tuple(float(v) for v in ent),
            samples=tuple(SampleRecord.from_dict(s) for s in data.get("samples") or ()),
            claims=tuple(ClaimScore.from_dict(c) for c in data.get("claims") or ()),
            verifier_flags=None if flags is None else tuple(VerifierFlag.from_dict(f) for f in flags),
            tool_diag=data.get("tool_diag"),
            label=None if label is None else CorrectnessLabel.from_dict(label),
            bucket_hint=data.get("bucket_hint"),
            debug=data.get("debug"),
        )


class LineError(InvalidSignal):
    def __init__(self, lineno, cause):
        super().__init__(f"line {lineno}: {cause}")
        self.lineno = lineno


def iter_jsonl(lines: Iterable[str]) -> Iterator[tuple[int, dict]]:
    """Yield (line number, object) pairs, skipping blank lines."""
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LineError(lineno, f"malformed JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise LineError(lineno, "expected a JSON object")
        yield lineno, obj


def read_records(path) -> list[RawSignalsRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, obj in iter_jsonl(fh):
            try:
                records.append(RawSignalsRecord.from_dict(obj))
            except (InvalidSignal, TypeError, ValueError) as exc:
                raise LineError(lineno, exc) from exc
    return records


def dumps_records(records: Iterable[RawSignalsRecord], include_debug: bool = False) -> str:
    return "".join(json.dumps(r.to_dict(include_debug), sort_keys=True) + "\n" for r in records)
