import math

import numpy as np
import pytest

from unicr.config import DecisionConfig, RunConfig
from unicr.evaluation import SyntheticSpec, generate_synthetic
from unicr.evidence import FeatureConfig
from unicr.head import HeadModel
from unicr.pipeline import CalibrationArtifact, ReasonStats, train
from unicr.records import ClaimScore, RawSignalsRecord, SampleRecord, VerifierFlag
from unicr.risk import ThresholdPolicy
from unicr.targets import exact_label

FULL = FeatureConfig(seq=True, entropy=True, sc=True, entailment=True, rag=True, verifier=True, tool=True)
TRACE_FEATURES = FeatureConfig(seq=True, sc=True, rag=True, verifier=True, tool=True)


def samples(keys, verifier=None, sim=None):
    """Samples with answer keys and optional per-sample verifier outcome."""
    out = []
    for i, k in enumerate(keys):
        row = None if sim is None else tuple(sim[i])
        out.append(SampleRecord(k, row, None, None if verifier is None else verifier[i]))
    return tuple(out)


def claims(support, contradiction=None):
    contradiction = contradiction or [0.0] * len(support)
    return tuple(ClaimScore(e, c >= 0.5, True, e, c) for e, c in zip(support, contradiction))


def record(id="r", logprobs=(-0.5,), keys="AAA", verifier="all", support=(0.9, 0.9),
           contradiction=None, flags=(True, True), tool_diag=0.9, label=None, **extra):
    if verifier == "all":
        verifier = (True,) * len(keys)
    return RawSignalsRecord(
        id=id, token_logprobs=None if logprobs is None else tuple(logprobs), samples=samples(keys, verifier),
        claims=claims(support, contradiction),
        verifier_flags=None if flags is None else tuple(VerifierFlag(f) for f in flags), tool_diag=tool_diag,
        label=label, **extra)


def logprob_for(c, bias=3.0):
    """Token log-prob that makes the trace head output confidence ``c``."""
    return math.log(c / (1 - c)) - bias


def trace_artifact(tau=0.3, decision=None, bias=3.0):
    """Hand-built artifact: logit = bar_ell + bias, every other weight zero."""
    schema = TRACE_FEATURES.schema
    d = len(schema)
    w = [0.0] * d + [bias]
    w[schema.index("bar_ell")] = 1.0
    head = HeadModel("logistic", schema, tuple(w), 1.0, (0.0,) * d, (1.0,) * d)
    policy = ThresholdPolicy("conformal", 0.05, 100, global_tau=tau)
    stats = ReasonStats((0.0,) * d, (1.0,) * d)
    return CalibrationArtifact(head, None, policy, TRACE_FEATURES, decision or DecisionConfig(), stats,
                               {"seed": 0})


@pytest.fixture(scope="session")
def synthetic_records():
    return generate_synthetic(SyntheticSpec(n=2000, seed=11))


@pytest.fixture(scope="session")
def trained(synthetic_records):
    return train(synthetic_records, RunConfig(features=FULL, seed=5))


def binary_instance(rng, n):
    c = np.round(rng.random(n), 2)  # rounding forces ties
    r = (rng.random(n) < c).astype(float)
    return c, r


def gradient_check(seed, kind=None, h=1e-6):
    """Max relative error between analytic and central-difference gradients of
    the full head objective on one random small instance."""
    from unicr.head import HeadConfig, _Context, _logit_mask, n_weights, objective

    rng = np.random.default_rng(seed)
    kind = kind or ("logistic", "mlp2")[seed % 2]
    d, n = int(rng.integers(1, 9)), int(rng.integers(20, 65))
    hidden = 0 if kind == "logistic" else int(rng.integers(2, 9))
    schema = ("bar_ell", "mean_entropy") + tuple(f"f{j}" for j in range(d))
    schema = schema[:d]
    X = rng.normal(size=(n, d))
    r = (rng.random(n) < 0.6).astype(float) if seed % 3 else rng.random(n)
    cfg = HeadConfig(kind=kind, hidden=max(hidden, 1), alpha=float(rng.uniform(0.05, 1.0)),
                     selective_weight=float(rng.uniform(0, 1)), working_tau=float(rng.uniform(0.3, 0.7)),
                     smoothing_weight=float(rng.uniform(0, 1)), smoothing_delta=0.1,
                     l2_lambda=float(rng.uniform(0, 0.1)))
    ctx = _Context(kind, d, hidden, _logit_mask(schema), X.mean(0) * 0.5, np.full(d, 1.3), cfg.l2_lambda)
    theta = np.r_[rng.normal(scale=0.5, size=n_weights(kind, d, hidden)), rng.normal(scale=0.3)]
    _, grad = objective(theta, ctx, X, r, cfg)
    num = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        num[i] = (objective(theta + e, ctx, X, r, cfg)[0] - objective(theta - e, ctx, X, r, cfg)[0]) / (2 * h)
    return float(np.max(np.abs(grad - num)) / max(np.max(np.abs(num)), 1e-8))


def logistic_data(n, w=(2.0, -1.5, 1.0, 0.5), b=1.5, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, len(w)))
    p = 1 / (1 + np.exp(-(X @ np.asarray(w) + b)))
    r = (rng.random(n) < p).astype(float)
    return X, p, r


def inference_traces():
    """Scripted control-flow cases: (name, record, refresh callback, expected
    (decision, reason, retried), expected number of refresh calls).
    All use ``trace_artifact(tau=0.3)``."""
    low_cov = dict(support=(0.2, 0.2))          # coverage 0
    high_cov = dict(support=(0.9,) * 9 + (0.1,))  # coverage 0.9

    def refreshed(c, **kw):
        return lambda rec: record(id=rec.id, logprobs=(logprob_for(c),), **kw)

    def broken(rec):
        raise TimeoutError("retriever unavailable")

    return [
        ("answer", record(logprobs=(logprob_for(0.9),)), None, ("answer", None, False), 0),
        ("abstain_no_retry_high_coverage",
         record(logprobs=(logprob_for(0.2),), keys="ABC", **high_cov), refreshed(0.9),
         ("abstain", "high_semantic_dispersion", False), 0),
        ("abstain_no_retry_far_below",
         record(logprobs=(logprob_for(0.2),), **low_cov), refreshed(0.9),
         ("abstain", "low_evidence_coverage", False), 0),
        ("abstain_retry_answer", record(logprobs=(logprob_for(0.28),), **low_cov),
         refreshed(0.35, support=(0.9, 0.9)), ("answer", None, True), 1),
        ("abstain_retry_abstain", record(logprobs=(logprob_for(0.28),), **low_cov),
         refreshed(0.26, **low_cov), ("abstain", "low_evidence_coverage", True), 1),
        ("retry_callback_fails", record(logprobs=(logprob_for(0.28),), **low_cov), broken,
         ("abstain", "tool_failure", False), 1),
        ("reason_tool_failure", record(logprobs=(logprob_for(0.1),), flags=(False, False)), None,
         ("abstain", "tool_failure", False), 0),
        ("reason_verifier_rejection", record(logprobs=(logprob_for(0.1),), verifier=(False, False, True)), None,
         ("abstain", "verifier_rejection", False), 0),
        ("reason_low_evidence_coverage", record(logprobs=(logprob_for(0.1),), keys="ABC", support=(0.0,)), None,
         ("abstain", "low_evidence_coverage", False), 0),
        ("reason_high_semantic_dispersion", record(logprobs=(logprob_for(0.1),), keys="AABCD"), None,
         ("abstain", "high_semantic_dispersion", False), 0),
    ]


def run_trace(artifact, rec, refresh):
    from unicr.pipeline import infer

    calls = []

    def counted(r):
        calls.append(r.id)
        return refresh(r)

    out = infer(artifact, rec, refresh=None if refresh is None else counted)
    return out, len(calls)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
