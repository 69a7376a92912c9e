"""Evidence features: turning raw upstream signals into the fused vector z(x).

Every function here is pure. Families can be switched on and off through
:class:`FeatureConfig`; a disabled family removes its columns from the schema
instead of being zero-filled.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, InvalidSignal, MissingSignal
from .records import SYMMETRY_TOL, ClaimScore, RawSignalsRecord, SampleRecord

FAMILY_ORDER = ("seq", "entropy", "sc", "entailment", "rag", "verifier", "tool")

# Features derived from model logits; these are divided by the head temperature.
LOGIT_FEATURES = frozenset({"bar_ell", "mean_entropy"})

# +1: larger values mean more trustworthy, -1: larger values mean less.
FEATURE_DIRECTION = {
    "bar_ell": 1, "rank_pct": 1, "mean_entropy": -1,
    "agree": 1, "h_sc": -1, "cluster_mass": 1,
    "avg_entailment": 1,
    "coverage": 1, "align": 1, "conflict": -1,
    "consis_ver": 1,
    "tool_pass": 1, "tool_diag": 1,
}

FEATURE_FAMILY = {
    "bar_ell": "seq", "rank_pct": "seq", "mean_entropy": "entropy",
    "agree": "sc", "h_sc": "sc", "cluster_mass": "sc",
    "avg_entailment": "entailment",
    "coverage": "rag", "align": "rag", "conflict": "rag",
    "consis_ver": "verifier",
    "tool_pass": "tool", "tool_diag": "tool",
}

DEGENERATE_EVIDENCE = "degenerate_evidence"


# --------------------------------------------------------------------------
# sequence features

def length_normalized_loglik(token_logprobs: Sequence[float]) -> float:
    if token_logprobs is None or len(token_logprobs) == 0:
        raise MissingSignal("token log-probabilities are empty", family="seq")
    arr = np.asarray(token_logprobs, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr > 0):
        raise InvalidSignal("token log-probabilities must be finite and <= 0")
    return float(arr.mean())


def mean_token_entropy(token_entropies: Sequence[float]) -> float:
    if token_entropies is None or len(token_entropies) == 0:
        raise MissingSignal("token entropies are empty", family="entropy")
    arr = np.asarray(token_entropies, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidSignal("token entropies must be finite and >= 0")
    return float(arr.mean())


def rank_normalized_logprob(bar_ell: float, reference_pool: Sequence[float]) -> float:
    """Mid-rank percentile of ``bar_ell`` in the pool (ties count half)."""
    if reference_pool is None or len(reference_pool) == 0:
        raise MissingSignal("reference pool is empty", family="seq")
    pool = np.sort(np.asarray(reference_pool, dtype=float))
    below = np.searchsorted(pool, bar_ell, side="left")
    not_above = np.searchsorted(pool, bar_ell, side="right")
    return float((below + 0.5 * (not_above - below)) / len(pool))


# --------------------------------------------------------------------------
# self-consistency features

def _answer_counts(samples: Sequence[SampleRecord]) -> Counter:
    if not samples:
        raise MissingSignal("no samples for self-consistency features", family="sc")
    return Counter(s.answer_key for s in samples)


def agreement_rate(samples: Sequence[SampleRecord]) -> float:
    counts = _answer_counts(samples)
    return max(counts.values()) / len(samples)


def predictive_entropy(samples: Sequence[SampleRecord]) -> float:
    counts = _answer_counts(samples)
    k = len(samples)
    h = -sum((c / k) * math.log(c / k) for c in counts.values())
    return max(0.0, h)


def verifier_consistency(samples: Sequence[SampleRecord]) -> float:
    if not samples:
        raise MissingSignal("no samples for verifier consistency", family="verifier")
    if any(s.verifier_pass is None for s in samples):
        raise MissingSignal("a sample lacks verifier_pass", family="verifier")
    return sum(1 for s in samples if s.verifier_pass) / len(samples)


class Dispersion(NamedTuple):
    largest_cluster_mass: float
    avg_pairwise_entailment: float | None


def _square(samples, attr):
    rows = [getattr(s, attr) for s in samples]
    if all(r is None for r in rows):
        return None
    if any(r is None for r in rows):
        raise MissingSignal(f"{attr} present on some samples only", family="sc")
    return np.asarray(rows, dtype=float)


def semantic_dispersion(samples: Sequence[SampleRecord], link_threshold: float = 0.75) -> Dispersion:
    """Largest cluster mass and mean off-diagonal entailment.

    Clusters are connected components of the graph joining samples whose
    similarity is at least ``link_threshold``. When no sample carries a
    similarity row, similarity is exact equality of ``answer_key``.
    """
    if not samples:
        raise MissingSignal("no samples for semantic dispersion", family="sc")
    k = len(samples)
    sim = _square(samples, "embedding_sim")
    if sim is None:
        keys = [s.answer_key for s in samples]
        sim = np.array([[1.0 if a == b else 0.0 for b in keys] for a in keys])
    if np.max(np.abs(sim - sim.T)) > SYMMETRY_TOL:
        raise InvalidSignal("similarity matrix is not symmetric")
    if np.max(np.abs(np.diag(sim) - 1.0)) > SYMMETRY_TOL:
        raise InvalidSignal("self-similarity must be 1")
    adjacency = sim >= link_threshold
    np.fill_diagonal(adjacency, True)
    _, labels = connected_components(adjacency.astype(np.int8), directed=False)
    mass = np.bincount(labels).max() / k

    ent = _square(samples, "entailment_pairs")
    if ent is None:
        avg = None
    elif k == 1:
        avg = 0.0
    else:
        off = ~np.eye(k, dtype=bool)
        avg = float(ent[off].mean())
    return Dispersion(float(mass), avg)


# --------------------------------------------------------------------------
# retrieval features

class RagFeatures(NamedTuple):
    coverage: float
    align: float
    conflict: float
    degenerate: bool = False


def rag_features(claims: Sequence[ClaimScore], support_threshold: float = 0.5,
                 conflict_threshold: float = 0.5) -> RagFeatures:
    for t in (support_threshold, conflict_threshold):
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"threshold {t} outside [0, 1]")
    salient = [c for c in claims if c.salient]
    if not salient:
        return RagFeatures(0.0, 0.0, 0.0, degenerate=True)
    n = len(salient)
    ent = np.array([c.max_passage_entailment for c in salient])
    con = np.array([c.contradiction_score for c in salient])
    return RagFeatures(
        coverage=float(np.count_nonzero(ent >= support_threshold) / n),
        align=float(ent.mean()),
        conflict=float(np.count_nonzero(con >= conflict_threshold) / n),
    )


# --------------------------------------------------------------------------
# assembly

@dataclass(frozen=True)
class FeatureConfig:
    seq: bool = True
    entropy: bool = False
    sc: bool = True
    entailment: bool = False
    rag: bool = False
    verifier: bool = False
    tool: bool = False
    api_only: bool = False
    link_threshold: float = 0.75
    support_threshold: float = 0.5
    conflict_threshold: float = 0.5
    reference_pool: tuple[float, ...] | None = None
    min_dim: int = 1
    max_dim: int = 32

    def __post_init__(self):
        if self.reference_pool is not None:
            object.__setattr__(self, "reference_pool", tuple(sorted(float(v) for v in self.reference_pool)))
        if not 1 <= self.min_dim <= self.max_dim:
            raise ConfigError(f"invalid dimension range [{self.min_dim}, {self.max_dim}]")

    def enabled(self, family: str) -> bool:
        if self.api_only and family in ("seq", "entropy"):
            return False
        return bool(getattr(self, family))

    @property
    def schema(self) -> tuple[str, ...]:
        names: list[str] = []
        if self.enabled("seq"):
            names.append("bar_ell")
            if self.reference_pool:
                names.append("rank_pct")
        if self.enabled("entropy"):
            names.append("mean_entropy")
        if self.enabled("sc"):
            names += ["agree", "h_sc", "cluster_mass"]
        if self.enabled("entailment"):
            names.append("avg_entailment")
        if self.enabled("rag"):
            names += ["coverage", "align", "conflict"]
        if self.enabled("verifier"):
            names.append("consis_ver")
        if self.enabled("tool"):
            names += ["tool_pass", "tool_diag"]
        return tuple(names)

    def validate(self) -> None:
        d = len(self.schema)
        if d == 0:
            raise ConfigError("feature config enables no features")
        if not self.min_dim <= d <= self.max_dim:
            raise ConfigError(f"schema has {d} features, outside [{self.min_dim}, {self.max_dim}]")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["reference_pool"] = None if self.reference_pool is None else list(self.reference_pool)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown feature config keys {sorted(unknown)}")
        return cls(**data)

    def schema_hash(self) -> str:
        payload = json.dumps({"config": self.to_dict(), "schema": list(self.schema)},
                             sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    schema: tuple[str, ...]
    flags: frozenset = frozenset()

    def __post_init__(self):
        if len(self.values) != len(self.schema) or not self.schema:
            raise InvalidSignal("feature values and schema differ in length")
        if not all(math.isfinite(v) for v in self.values):
            raise InvalidSignal("non-finite feature value")

    @property
    def d(self) -> int:
        return len(self.values)

    def get(self, name: str, default=None):
        try:
            return self.values[self.schema.index(name)]
        except ValueError:
            return default

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def _require(cond, family, what):
    if not cond:
        raise MissingSignal(f"family {family!r} enabled but {what} missing", family=family)


def assemble_features(record: RawSignalsRecord, config: FeatureConfig) -> FeatureVector:
    config.validate()
    values: list[float] = []
    flags = set()
    if config.enabled("seq"):
        _require(record.token_logprobs, "seq", "token_logprobs")
        bar_ell = length_normalized_loglik(record.token_logprobs)
        values.append(bar_ell)
        if config.reference_pool:
            values.append(rank_normalized_logprob(bar_ell, config.reference_pool))
    if config.enabled("entropy"):
        _require(record.token_entropies, "entropy", "token_entropies")
        values.append(mean_token_entropy(record.token_entropies))
    if config.enabled("sc"):
        _require(record.samples, "sc", "samples")
        values += [agreement_rate(record.samples), predictive_entropy(record.samples),
                   semantic_dispersion(record.samples, config.link_threshold).largest_cluster_mass]
    if config.enabled("entailment"):
        _require(record.samples, "entailment", "samples")
        avg = semantic_dispersion(record.samples, config.link_threshold).avg_pairwise_entailment
        _require(avg is not None, "entailment", "entailment_pairs")
        values.append(avg)
    if config.enabled("rag"):
        rag = rag_features(record.claims, config.support_threshold, config.conflict_threshold)
        if rag.degenerate:
            flags.add(DEGENERATE_EVIDENCE)
        values += [rag.coverage, rag.align, rag.conflict]
    if config.enabled("verifier"):
        _require(record.samples, "verifier", "samples")
        try:
            values.append(verifier_consistency(record.samples))
        except MissingSignal as exc:
            raise MissingSignal(f"family 'verifier' enabled but {exc}", family="verifier") from exc
    if config.enabled("tool"):
        _require(record.verifier_flags, "tool", "verifier_flags")
        _require(record.tool_diag is not None, "tool", "tool_diag")
        vflags = record.verifier_flags
        values += [sum(1 for f in vflags if f.passed) / len(vflags), float(record.tool_diag)]
    return FeatureVector(tuple(float(v) for v in values), config.schema, frozenset(flags))


def available_families(records: Sequence[RawSignalsRecord], config: FeatureConfig) -> FeatureConfig:
    """Disable every enabled family that fails on at least one record.

    Used before training so optional families shrink the schema instead of
    being imputed.
    """
    changes = {}
    for family in FAMILY_ORDER:
        if not config.enabled(family):
            continue
        probe = replace(config, **{f: (f == family) for f in FAMILY_ORDER}, min_dim=1)
        for rec in records:
            try:
                assemble_features(rec, probe)
            except MissingSignal:
                changes[family] = False
                break
    return replace(config, **changes)


def feature_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    if not vectors:
        raise InvalidSignal("no feature vectors")
    schema = vectors[0].schema
    for v in vectors:
        if v.schema != schema:
            raise InvalidSignal("inconsistent feature schemas in batch")
    return np.array([v.values for v in vectors], dtype=float)
