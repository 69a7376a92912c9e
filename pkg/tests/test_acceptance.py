"""Acceptance gate: one test per primary criterion, each reporting a
PASS/FAIL line with the measured value and its tolerance."""

import json
import time

import numpy as np
import pytest

from unicr.cli import main
from unicr.evaluation import SyntheticSpec, ValiditySpec, generate_synthetic, sample_synthetic, simulate_validity
from unicr.head import fit_head, predict_batch
from unicr.isotonic import fit_isotonic
from unicr.metrics import brier, ece, nll
from unicr.pipeline import confidences_for, infer, load_artifact
from unicr.records import dumps_records
from unicr.risk import bayes_threshold, conformal_threshold, validation_threshold

import conftest
from conftest import inference_traces, binary_instance, gradient_check, logistic_data, run_trace, trace_artifact
from test_risk import brute_validation, oracle_conformal

ALPHA = 0.05


def report(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    conftest.ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def test_conformal_validity():
    t0 = time.perf_counter()
    rep = simulate_validity(ValiditySpec(trials=1000, calibration_size=500, test_size=500, alpha=ALPHA, seed=0))
    elapsed = time.perf_counter() - t0
    m = rep["methods"]["conformal"]
    ok = m["violation_rate"] <= 0.08 and 0.03 <= m["mean_risk"] <= 0.055 and elapsed < 60
    report("conformal validity", ok,
           f"violation rate {m['violation_rate']:.3f} (<= 0.08), mean risk {m['mean_risk']:.4f} "
           f"(in [0.03, 0.055]), coverage {m['mean_coverage']:.3f}, {elapsed:.1f}s (< 60s)")


def test_bayes_threshold_optimality():
    p = sample_synthetic(SyntheticSpec(n=20_000, seed=1)).p
    grid = np.round(np.arange(0, 1.0001, 0.01), 2)
    worst_gap, worst_step = 0.0, 0.0
    for lam in (0.05, 0.1, 0.2):
        # expected loss with confidence equal to the true probability:
        # answered cases cost 1 - p, abstentions cost lambda
        loss = np.array([np.mean(np.where(p >= t, 1 - p, lam)) for t in grid])
        best = grid[np.argmin(loss)]
        tau = bayes_threshold(lam)
        gap = np.mean(np.where(p >= tau, 1 - p, lam)) - loss.min()
        worst_gap = max(worst_gap, gap)
        worst_step = max(worst_step, abs(best - tau))
    ok = worst_gap <= 0.002 and worst_step <= 0.01 + 1e-9
    report("Bayes threshold optimality", ok,
           f"max expected-loss gap {worst_gap:.2e} (<= 0.002), max |argmin - (1-lambda)| {worst_step:.2f} (<= 0.01)")


def test_validation_threshold_brute_force():
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(1, 201))
        c, r = binary_instance(rng, n)
        rho = float(rng.choice([0.0, rng.random() * 0.5, 1.0]))
        mismatches += validation_threshold(c, r, rho) != brute_validation(c, r, rho)
    report("validation sweep equals brute force", mismatches == 0, f"{mismatches}/200 mismatches (0)")


def test_conformal_threshold_oracle():
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(200):
        c, r = binary_instance(rng, int(rng.integers(1, 201)))
        alpha = float(rng.uniform(0.01, 0.5))
        for smoothing in ("none", "interpolated"):
            mismatches += conformal_threshold(c, r, alpha, smoothing) != oracle_conformal(c, r, alpha, smoothing)
    report("conformal threshold equals order-statistic oracle", mismatches == 0,
           f"{mismatches}/400 mismatches over both smoothings (0)")


def test_calibration_consistency():
    X, _, r = logistic_data(50_000, seed=4)
    Xt, pt, rt = logistic_data(50_000, seed=5)
    model = fit_head(X, r)
    c = predict_batch(model, None, Xt)
    e, fitted, true = ece(c, rt, "fixed15"), nll(c, rt), nll(pt, rt)
    ok = e < 0.02 and fitted <= 1.02 * true
    report("calibration consistency", ok,
           f"held-out ECE {e:.4f} (< 0.02), NLL {fitted:.5f} vs generating {true:.5f} "
           f"({100 * (fitted / true - 1):+.2f}%, within 2%)")


def test_gradient_correctness():
    errs = [gradient_check(seed) for seed in range(50)]
    report("gradient correctness", max(errs) < 1e-4, f"max relative error {max(errs):.2e} over 50 instances (< 1e-4)")


def test_isotonic_never_increases_brier():
    rng = np.random.default_rng(6)
    worse = 0
    for _ in range(100):
        n = int(rng.integers(2, 300))
        c = rng.random(n)
        p = np.clip(c + rng.normal(scale=0.3) + rng.normal(scale=0.2, size=n), 0, 1)
        r = (rng.random(n) < p).astype(float)
        worse += brier(fit_isotonic(c, r)(c), r) > brier(c, r) + 1e-12
    report("isotonic post-map never increases Brier", worse == 0, f"{worse}/100 instances worse (0)")


def test_shift_behavior(tmp_path):
    spec = {"trials": 1000, "alpha": ALPHA, "synthetic": {"shift": {"kind": "mean_shift", "magnitude": 0.5}}}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["simulate", str(tmp_path / "spec.json"), "--out-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "validity_report.json").read_text())
    crc, val = rep["methods"]["conformal"], rep["methods"]["validation_preshift"]
    report("shift behavior", rep["shifted"] and crc["violation_rate"] <= 0.10,
           f"conformal violation rate {crc['violation_rate']:.3f} (<= 0.10), coverage {crc['mean_coverage']:.3f}; "
           f"pre-shift validation threshold (reported only): violation {val['violation_rate']:.3f}, "
           f"coverage {val['mean_coverage']:.3f}")


def test_determinism(tmp_path):
    (tmp_path / "train.jsonl").write_text(dumps_records(generate_synthetic(SyntheticSpec(n=1500, seed=7))))
    probe = generate_synthetic(SyntheticSpec(n=1000, seed=8))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"features": {"rag": True, "verifier": True, "tool": True}, "seed": 13}))
    for sub in ("a", "b"):
        assert main(["train", str(tmp_path / "train.jsonl"), "--config", str(cfg),
                     "--out-dir", str(tmp_path / sub)]) == 0
    a, b = (tmp_path / "a" / "artifact.json").read_bytes(), (tmp_path / "b" / "artifact.json").read_bytes()
    art = load_artifact(tmp_path / "a" / "artifact.json")
    (tmp_path / "c.json").write_text(json.dumps(art.to_dict()))
    again = load_artifact(tmp_path / "c.json")
    same = [infer(art, r) for r in probe] == [infer(again, r) for r in probe]
    same_conf = np.array_equal(confidences_for(art, probe), confidences_for(again, probe))
    report("determinism", a == b and same and same_conf,
           f"artifacts byte-identical: {a == b}; round-trip decisions identical on 1000 records: {same and same_conf}")


def test_inference_control_flow():
    art = trace_artifact(tau=0.3)
    failed = []
    seen = set()
    for name, rec, refresh, expected, calls in inference_traces():
        out, n = run_trace(art, rec, refresh)
        if (out.decision, out.reason, out.retried) != expected or n != calls:
            failed.append(name)
        seen.add(out.reason)
    kinds = {"answer", "abstain_no_retry_high_coverage", "abstain_retry_answer", "abstain_retry_abstain"}
    covered = kinds <= {t[0] for t in inference_traces()} and {
        "low_evidence_coverage", "high_semantic_dispersion", "tool_failure", "verifier_rejection"} <= seen
    report("inference control flow", not failed and covered,
           f"{len(inference_traces()) - len(failed)}/{len(inference_traces())} traces match, all paths and reasons covered: {covered}")
