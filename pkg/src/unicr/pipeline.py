"""Training (evidence -> head -> threshold) and risk-controlled inference with
retry, refusal reasons and escalation; artifact serialization."""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .config import DecisionConfig, RunConfig
from .errors import ArtifactError, ConfigError, MissingSignal, SchemaError, StageError, UnicrError
from .evidence import (DEGENERATE_EVIDENCE, FEATURE_DIRECTION, FEATURE_FAMILY, FeatureConfig, FeatureVector,
                       assemble_features, available_families, feature_matrix)
from .head import HeadModel, fit_head, predict_batch
from .isotonic import IsotonicMap, fit_isotonic
from .metrics import label_values
from .records import RawSignalsRecord
from .risk import ThresholdPolicy, build_policy, ltt_split

ARTIFACT_VERSION = "unicr-artifact/1"

ANSWER, ABSTAIN = "answer", "abstain"
LOW_COVERAGE = "low_evidence_coverage"
DISPERSION = "high_semantic_dispersion"
TOOL_FAILURE = "tool_failure"
VERIFIER_REJECTION = "verifier_rejection"
REASONS = (LOW_COVERAGE, DISPERSION, TOOL_FAILURE, VERIFIER_REJECTION)

FAMILY_REASON = {"seq": DISPERSION, "entropy": DISPERSION, "sc": DISPERSION, "entailment": DISPERSION,
                 "rag": LOW_COVERAGE, "verifier": VERIFIER_REJECTION, "tool": TOOL_FAILURE}


# --------------------------------------------------------------------------
# artifact

@dataclass(frozen=True)
class ReasonStats:
    """Per-feature mean/std of the answered calibration population."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["mean"]), tuple(data["std"]))


@dataclass(frozen=True)
class CalibrationArtifact:
    head: HeadModel
    isotonic: IsotonicMap | None
    policy: ThresholdPolicy
    feature_config: FeatureConfig
    decision: DecisionConfig
    reason_stats: ReasonStats
    provenance: dict
    version: str = ARTIFACT_VERSION

    @property
    def schema(self):
        return self.feature_config.schema

    def to_dict(self) -> dict:
        policy = self.policy.to_dict()
        policy["refusal"] = {**vars(self.decision), "reason_stats": self.reason_stats.to_dict()}
        return {
            "version": self.version,
            "head": self.head.to_dict(),
            "isotonic": None if self.isotonic is None else self.isotonic.to_dict(),
            "policy": policy,
            "feature_config": {"config": self.feature_config.to_dict(), "schema": list(self.schema),
                               "schema_hash": self.feature_config.schema_hash()},
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationArtifact":
        expected = {"version", "head", "isotonic", "policy", "feature_config", "provenance"}
        if set(data) != expected:
            raise ArtifactError(f"artifact keys {sorted(data)} != {sorted(expected)}")
        if data["version"] != ARTIFACT_VERSION:
            raise ArtifactError(f"artifact version {data['version']!r}, expected {ARTIFACT_VERSION!r}")
        fc = data["feature_config"]
        feature_config = FeatureConfig.from_dict(fc["config"])
        if fc.get("schema_hash") != feature_config.schema_hash():
            raise ArtifactError("feature schema hash mismatch")
        if tuple(fc.get("schema", ())) != feature_config.schema:
            raise ArtifactError("stored schema disagrees with feature config")
        head = HeadModel.from_dict(data["head"])
        if head.schema != feature_config.schema:
            raise ArtifactError("head dimensionality does not match the feature schema")
        policy_data = dict(data["policy"])
        refusal = dict(policy_data.pop("refusal"))
        stats = ReasonStats.from_dict(refusal.pop("reason_stats"))
        if len(stats.mean) != head.d:
            raise ArtifactError("reason statistics do not match the feature schema")
        return cls(
            head=head,
            isotonic=None if data["isotonic"] is None else IsotonicMap.from_dict(data["isotonic"]),
            policy=ThresholdPolicy.from_dict(policy_data),
            feature_config=feature_config,
            decision=DecisionConfig(**refusal),
            reason_stats=stats,
            provenance=dict(data["provenance"]),
            version=data["version"],
        )


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, shortest round-trip float repr."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def atomic_write(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_artifact(artifact: CalibrationArtifact, path) -> None:
    atomic_write(path, canonical_json(artifact.to_dict()))


def load_artifact(path, expected_mode: str | None = None) -> CalibrationArtifact:
    """Load and verify an artifact. ``expected_mode`` guards against replaying
    an artifact under a config that expects a different threshold mode."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read artifact {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ArtifactError("artifact must be a JSON object")
    try:
        artifact = CalibrationArtifact.from_dict(data)
    except ArtifactError:
        raise
    except (KeyError, TypeError, ValueError, UnicrError) as exc:
        raise ArtifactError(f"malformed artifact: {exc}") from exc
    if expected_mode is not None:
        mode = "conformal_bucketed" if expected_mode == "bucketed" else expected_mode
        if artifact.policy.mode != mode:
            raise ArtifactError(f"artifact was trained in {artifact.policy.mode!r} mode, config expects {mode!r}")
    return artifact


# --------------------------------------------------------------------------
# training

def _features(records, config, stage):
    try:
        return [assemble_features(r, config) for r in records]
    except UnicrError as exc:
        raise StageError(stage, exc) from exc


def _labels(records):
    missing = [r.id for r in records if r.label is None]
    if missing:
        raise StageError("validate", f"records without labels: {missing[:5]}")
    kinds = {r.label.kind for r in records}
    if len(kinds) > 1:
        raise StageError("validate", f"mixed label kinds {sorted(kinds)}")
    return label_values([r.label for r in records])


def train(records, config: RunConfig | None = None, created: str | None = None) -> CalibrationArtifact:
    """Split, extract features, fit the head (and isotonic map), then choose
    the threshold on the held-out calibration split."""
    cfg = config or RunConfig()
    records = list(records)
    _labels(records)
    try:
        split = ltt_split(records, cfg.split, cfg.seed)
    except UnicrError as exc:
        raise StageError("split", exc) from exc

    fcfg = cfg.features
    if cfg.drop_missing_families:
        fcfg = available_families(records, fcfg)
    try:
        fcfg.validate()
    except UnicrError as exc:
        raise StageError("features", exc) from exc

    z_train = _features(split.train, fcfg, "features")
    z_tune = _features(split.tune, fcfg, "features")
    z_cal = _features(split.calibrate, fcfg, "features")
    r_train, r_tune, r_cal = _labels(split.train), _labels(split.tune), _labels(split.calibrate)

    head_cfg = replace(cfg.head, seed=cfg.seed)
    if head_cfg.working_tau is None:
        head_cfg = replace(head_cfg, working_tau=1.0 - cfg.policy.level)
    try:
        head = fit_head(z_train, r_train, head_cfg, tune=(z_tune, r_tune))
    except UnicrError as exc:
        raise StageError("head", exc) from exc

    iso = None
    if head_cfg.use_isotonic:
        try:
            iso = fit_isotonic(predict_batch(head, None, z_tune), r_tune)
        except UnicrError as exc:
            raise StageError("isotonic", exc) from exc

    c_cal = predict_batch(head, iso, z_cal)
    coverage = None
    if "coverage" in fcfg.schema:
        coverage = [z.get("coverage") for z in z_cal]
    pc = cfg.policy
    try:
        policy = build_policy(pc.mode, c_cal, r_cal, pc.level, coverage, pc.bucket_edges, pc.smoothing,
                              pc.min_bucket_size)
    except UnicrError as exc:
        raise StageError("threshold", exc) from exc

    stats = _reason_stats(z_cal, c_cal, policy, coverage)
    provenance = {
        "seed": cfg.seed,
        "split_fractions": list(cfg.split),
        "split_sizes": [len(split.train), len(split.tune), len(split.calibrate)],
        "alpha_or_rho": pc.level,
        "mode": policy.mode,
        "label_kind": records[0].label.kind,
        "config_hash": cfg.config_hash(),
        "head_config": asdict(head_cfg),
        "created": created,
    }
    return CalibrationArtifact(head, iso, policy, fcfg, cfg.decision, stats, provenance)


def _reason_stats(z_cal, c_cal, policy, coverage):
    X = feature_matrix(z_cal)
    taus = np.array([policy.tau_for(None if coverage is None else coverage[i]) for i in range(len(z_cal))])
    answered = c_cal >= taus
    pop = X[answered] if answered.sum() >= 2 else X
    std = pop.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return ReasonStats(tuple(pop.mean(axis=0).tolist()), tuple(std.tolist()))


# --------------------------------------------------------------------------
# inference

@dataclass(frozen=True)
class DecisionOutcome:
    decision: str
    confidence: float
    reason: str | None = None
    retried: bool = False
    message: str = ""
    id: str | None = None
    tau: float | None = None

    def __post_init__(self):
        if (self.decision == ABSTAIN) != (self.reason is not None):
            raise ValueError("reason must be present exactly when abstaining")

    def to_dict(self) -> dict:
        return {"id": self.id, "decision": self.decision, "confidence": self.confidence,
                "reason": self.reason, "retried": self.retried}


@dataclass
class SessionState:
    """Per-conversation memory of recent decisions; never shared across threads."""

    recent_outcomes: deque = field(default_factory=lambda: deque(maxlen=8))
    escalation_level: int = 0

    def record(self, outcome: DecisionOutcome) -> None:
        self.recent_outcomes.append(outcome)
        if _last_two_refusals_share_reason(self):
            self.escalation_level += 1


def _last_two_refusals_share_reason(session):
    if len(session.recent_outcomes) < 2:
        return False
    a, b = session.recent_outcomes[-2], session.recent_outcomes[-1]
    return a.decision == b.decision == ABSTAIN and a.reason == b.reason


def escalate(session: SessionState) -> str:
    if not _last_two_refusals_share_reason(session):
        return "none"
    reason = session.recent_outcomes[-1].reason
    if reason == DISPERSION:
        return "increase_K"
    if reason == LOW_COVERAGE:
        return "refresh_retrieval"
    return "none"


def reason_tag(features: FeatureVector, config: DecisionConfig | None = None,
               stats: ReasonStats | None = None) -> str:
    """Fixed priority ladder, then the family with the largest standardized
    deviation in its failing direction."""
    cfg = config or DecisionConfig()
    tool_pass = features.get("tool_pass")
    tool_diag = features.get("tool_diag")
    if tool_pass is not None and (tool_pass == 0.0 or tool_diag < cfg.tool_threshold):
        return TOOL_FAILURE
    consis = features.get("consis_ver")
    if consis is not None and consis < cfg.verifier_threshold:
        return VERIFIER_REJECTION
    coverage = features.get("coverage")
    if DEGENERATE_EVIDENCE in features.flags or (coverage is not None and coverage < cfg.coverage_threshold):
        return LOW_COVERAGE
    mass = features.get("cluster_mass")
    if mass is not None and mass < cfg.dispersion_threshold:
        return DISPERSION
    x = features.as_array()
    if stats is None:
        mean, std = np.zeros_like(x), np.ones_like(x)
    else:
        mean, std = np.asarray(stats.mean), np.asarray(stats.std)
    direction = np.array([FEATURE_DIRECTION[n] for n in features.schema])
    badness = -direction * (x - mean) / std
    worst = features.schema[int(np.argmax(badness))]
    return FAMILY_REASON[FEATURE_FAMILY[worst]]


_TEMPLATES = {
    LOW_COVERAGE: ("I'm not confident enough to answer: the retrieved evidence supports too little of it{detail}. "
                   "I can run a search for sources if you'd like."),
    DISPERSION: ("I'm not confident enough to answer: independent attempts at this question disagree{detail}. "
                 "I can try again with more samples, or you could narrow the question."),
    TOOL_FAILURE: ("I'm not confident enough to answer: the tools I checked with returned inconsistent "
                   "results{detail}. I can re-run them or try a different approach."),
    VERIFIER_REJECTION: ("I'm not confident enough to answer: a verifier rejected the candidate answer{detail}. "
                         "I can revise it and check again."),
}


def refusal_message(reason: str, context: dict | None = None) -> str:
    if reason not in _TEMPLATES:
        raise ValueError(f"unknown refusal reason {reason!r}")
    context = context or {}
    detail = ""
    if reason == LOW_COVERAGE and context.get("coverage") is not None:
        detail = f" (about {round(100 * context['coverage'])}% of claims supported)"
    elif reason == DISPERSION and context.get("agreement") is not None:
        detail = f" (only {round(100 * context['agreement'])}% agreement)"
    elif reason == TOOL_FAILURE and context.get("tool_pass") is not None:
        detail = f" ({round(100 * context['tool_pass'])}% of checks passed)"
    elif reason == VERIFIER_REJECTION and context.get("verifier_pass") is not None:
        detail = f" ({round(100 * context['verifier_pass'])}% of candidates passed)"
    return _TEMPLATES[reason].format(detail=detail)


def _score(artifact, record):
    if artifact.head.schema != artifact.feature_config.schema:
        raise SchemaError("artifact head and feature schema disagree")
    z = assemble_features(record, artifact.feature_config)
    c = float(predict_batch(artifact.head, artifact.isotonic, [z])[0])
    tau = artifact.policy.tau_for(z.get("coverage"), record.bucket_hint)
    return z, c, tau


def _abstain(artifact, record, z, c, tau, retried, reason=None):
    reason = reason or reason_tag(z, artifact.decision, artifact.reason_stats)
    context = {"coverage": z.get("coverage"), "agreement": z.get("agree"), "tool_pass": z.get("tool_pass"),
               "verifier_pass": z.get("consis_ver")}
    return DecisionOutcome(ABSTAIN, c, reason, retried, refusal_message(reason, context), record.id, tau)


def infer(artifact: CalibrationArtifact, record: RawSignalsRecord, session: SessionState | None = None,
          refresh: Callable[[RawSignalsRecord], RawSignalsRecord] | None = None) -> DecisionOutcome:
    """Answer iff the calibrated confidence clears the record's threshold.

    A record just below threshold with low retrieval coverage gets one retry:
    ``refresh`` supplies a re-retrieved version of the record.
    """
    z, c, tau = _score(artifact, record)
    if c >= tau:
        outcome = DecisionOutcome(ANSWER, c, None, False, "", record.id, tau)
    else:
        outcome = None
        dc = artifact.decision
        coverage = z.get("coverage")
        if (refresh is not None and artifact.feature_config.enabled("rag") and coverage is not None
                and tau - dc.retry_margin <= c and coverage < dc.retry_coverage):
            try:
                fresh = refresh(record)
                z2, c2, tau2 = _score(artifact, fresh)
            except Exception:
                outcome = _abstain(artifact, record, z, c, tau, False, reason=TOOL_FAILURE)
            else:
                if c2 >= tau2:
                    outcome = DecisionOutcome(ANSWER, c2, None, True, "", record.id, tau2)
                else:
                    outcome = _abstain(artifact, record, z2, c2, tau2, True)
        if outcome is None:
            outcome = _abstain(artifact, record, z, c, tau, False)
    if session is not None:
        session.record(outcome)
    return outcome


def confidences_for(artifact: CalibrationArtifact, records) -> np.ndarray:
    z = [assemble_features(r, artifact.feature_config) for r in records]
    return predict_batch(artifact.head, artifact.isotonic, z)
