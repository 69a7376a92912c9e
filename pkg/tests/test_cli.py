import json

import pytest

from unicr.cli import main
from unicr.evaluation import SyntheticSpec, generate_synthetic, summary
from unicr.records import dumps_records


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "train.jsonl").write_text(dumps_records(generate_synthetic(SyntheticSpec(n=800, seed=21))))
    (d / "test.jsonl").write_text(dumps_records(generate_synthetic(SyntheticSpec(n=200, seed=22))))
    (d / "cfg.json").write_text(json.dumps({"features": {"rag": True, "verifier": True, "tool": True}, "seed": 3}))
    return d


def test_extract(files, tmp_path):
    assert main(["extract", str(files / "test.jsonl"), "--config", str(files / "cfg.json"),
                 "--out-dir", str(tmp_path)]) == 0
    rows = [json.loads(l) for l in (tmp_path / "features.jsonl").read_text().splitlines()]
    assert len(rows) == 200 and "coverage" in rows[0]["features"]
    first = (tmp_path / "features.jsonl").read_bytes()
    main(["extract", str(files / "test.jsonl"), "--config", str(files / "cfg.json"), "--out-dir", str(tmp_path)])
    assert (tmp_path / "features.jsonl").read_bytes() == first
    manifest = json.loads((tmp_path / "extract.manifest.json").read_text())
    assert len(manifest["config_hash"]) == 64


def test_extract_empty_and_malformed(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["extract", str(tmp_path / "empty.jsonl"), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "features.jsonl").read_text() == ""
    (tmp_path / "bad.jsonl").write_text('{"id": "a"}\n{broken\n')
    assert main(["extract", str(tmp_path / "bad.jsonl"), "--out-dir", str(tmp_path)]) == 3


def test_train_infer_eval(files, tmp_path, capsys):
    out = str(tmp_path)
    assert main(["train", str(files / "train.jsonl"), "--config", str(files / "cfg.json"), "--out-dir", out]) == 0
    art = tmp_path / "artifact.json"
    assert main(["infer", str(art), str(files / "test.jsonl"), "--out-dir", out]) == 0
    decisions = [json.loads(l) for l in (tmp_path / "decisions.jsonl").read_text().splitlines()]
    assert [d["id"] for d in decisions] == [f"syn-{i:06d}" for i in range(200)]
    assert set(decisions[0]) == {"id", "decision", "confidence", "reason", "retried"}
    assert main(["eval", "--decisions", str(tmp_path / "decisions.jsonl"), "--records", str(files / "test.jsonl"),
                 "--bootstrap", "200", "--out-dir", out]) == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    labels = [r.label.value for r in generate_synthetic(SyntheticSpec(n=200, seed=22))]
    conf = [d["confidence"] for d in decisions]
    lib = summary(conf, labels, [d["decision"] == "answer" for d in decisions], B=200)
    for key in ("ece", "brier", "nll", "aurc", "coverage_at_risk", "violation_rate"):
        assert s[key] == lib[key]
    assert (tmp_path / "rc_curve.csv").read_text().startswith("tau,coverage,risk")
    assert main(["infer", str(art), str(files / "test.jsonl"), "--mode", "validation", "--out-dir", out]) == 3


def test_eval_perfect_scores_and_missing_labels(tmp_path):
    rows = [{"confidence": 1.0, "label": 1}] * 10
    (tmp_path / "s.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert main(["eval", "--scores", str(tmp_path / "s.jsonl"), "--bootstrap", "100",
                 "--out-dir", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["ece"] == 0 and s["aurc"] == 0
    (tmp_path / "n.jsonl").write_text('{"confidence": 0.4}\n')
    assert main(["eval", "--scores", str(tmp_path / "n.jsonl"), "--out-dir", str(tmp_path)]) == 3


def test_config_errors_exit_2(files, tmp_path, monkeypatch):
    (tmp_path / "bad.json").write_text(json.dumps({"head": {"depth": 2}}))
    assert main(["train", str(files / "train.jsonl"), "--config", str(tmp_path / "bad.json"),
                 "--out-dir", str(tmp_path)]) == 2
    monkeypatch.setenv("UNICR_SEED", "seven")
    assert main(["train", str(files / "train.jsonl"), "--out-dir", str(tmp_path)]) == 2


def test_seed_precedence(files, tmp_path, monkeypatch):
    def seed_of(args, sub):
        out = tmp_path / sub
        main(["train", str(files / "train.jsonl"), "--config", str(files / "cfg.json"), "--out-dir", str(out),
              *args])
        return json.loads((out / "artifact.json").read_text())["provenance"]["seed"]

    assert seed_of([], "a") == 3
    monkeypatch.setenv("UNICR_SEED", "11")
    assert seed_of([], "b") == 11
    assert seed_of(["--seed", "5"], "c") == 5


def test_abstain_always_exit_code(tmp_path):
    recs = generate_synthetic(SyntheticSpec(n=200, bias=-6.0, seed=1))
    (tmp_path / "r.jsonl").write_text(dumps_records(recs))
    code = main(["train", str(tmp_path / "r.jsonl"), "--mode", "validation", "--rho", "0.0",
                 "--out-dir", str(tmp_path)])
    assert code == 4


def test_simulate_reproducible(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps({"trials": 20, "train_size": 500}))
    for sub in ("a", "b"):
        assert main(["simulate", str(tmp_path / "spec.json"), "--out-dir", str(tmp_path / sub)]) == 0
    assert (tmp_path / "a" / "validity_report.json").read_bytes() == (tmp_path / "b" / "validity_report.json").read_bytes()
    (tmp_path / "bad.json").write_text(json.dumps({"trails": 3}))
    assert main(["simulate", str(tmp_path / "bad.json"), "--out-dir", str(tmp_path)]) == 2
