"""Batch command-line interface.

Exit codes: 0 ok, 2 config error, 3 data error, 4 the policy abstains on everything.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig
from .errors import ConfigError, StageError, UnicrError
from .evaluation import ValiditySpec, rc_curve, reliability_csv, simulate_validity, summary
from .evidence import assemble_features
from .metrics import label_values
from .records import LineError, iter_jsonl, read_records
from .targets import CorrectnessLabel

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ABSTAIN_ALWAYS = 0, 2, 3, 4
SEED_ENV = "UNICR_SEED"


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    level = args.alpha if args.alpha is not None else args.rho
    return cfg.with_overrides(seed=seed, level=level, mode=args.mode, api_only=args.api_only)


def _out(args, name) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _jsonl(rows) -> str:
    return "".join(pipeline.canonical_json(r) for r in rows)


def _manifest(args, command, cfg_hash, outputs, extra=None):
    data = {"command": command, "config_hash": cfg_hash, "outputs": sorted(outputs)}
    data.update(extra or {})
    pipeline.atomic_write(_out(args, f"{command}.manifest.json"), pipeline.canonical_json(data))


def cmd_extract(args) -> int:
    cfg = _run_config(args)
    cfg.features.validate()
    rows = []
    for rec in read_records(args.records):
        z = assemble_features(rec, cfg.features)
        row = {"id": rec.id, "features": dict(zip(z.schema, z.values)), "flags": sorted(z.flags)}
        if rec.label is not None:
            row["label"] = rec.label.to_dict()
        rows.append(row)
    path = _out(args, "features.jsonl")
    pipeline.atomic_write(path, _jsonl(rows))
    _manifest(args, "extract", cfg.config_hash(), [path.name], {"schema": list(cfg.features.schema)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    records = read_records(args.records)
    artifact = pipeline.train(records, cfg)
    path = _out(args, "artifact.json")
    pipeline.save_artifact(artifact, path)
    _manifest(args, "train", cfg.config_hash(), [path.name])
    if artifact.policy.abstains_always:
        print("warning: no threshold meets the risk level; the policy abstains on every input", file=sys.stderr)
        return EXIT_ABSTAIN_ALWAYS
    return EXIT_OK


def cmd_infer(args) -> int:
    mode = None if args.mode is None else ("conformal_bucketed" if args.mode == "bucketed" else args.mode)
    artifact = pipeline.load_artifact(args.artifact, expected_mode=mode)
    records = read_records(args.records)
    outcomes = [pipeline.infer(artifact, rec).to_dict() for rec in records]
    path = _out(args, "decisions.jsonl")
    pipeline.atomic_write(path, _jsonl(outcomes))
    _manifest(args, "infer", artifact.provenance.get("config_hash"), [path.name])
    return EXIT_ABSTAIN_ALWAYS if artifact.policy.abstains_always else EXIT_OK


def _labels_by_id(path):
    labels = {}
    for rec in read_records(path):
        if rec.label is not None:
            labels[rec.id] = rec.label
    return labels


def _eval_inputs(args):
    """Return (confidences, labels, answered-or-None) from either input form."""
    if args.scores:
        conf, labels = [], []
        with open(args.scores, encoding="utf-8") as fh:
            for lineno, obj in iter_jsonl(fh):
                if "confidence" not in obj or obj.get("label") is None:
                    raise LineError(lineno, "score rows need 'confidence' and 'label'")
                lab = obj["label"]
                conf.append(float(obj["confidence"]))
                labels.append(CorrectnessLabel.from_dict(lab) if isinstance(lab, dict) else float(lab))
        return np.array(conf), label_values(labels), None
    if not (args.decisions and args.records):
        raise ConfigError("eval needs --scores, or --decisions together with --records")
    by_id = _labels_by_id(args.records)
    conf, labels, answered = [], [], []
    with open(args.decisions, encoding="utf-8") as fh:
        for lineno, obj in iter_jsonl(fh):
            if obj.get("id") not in by_id:
                raise LineError(lineno, f"no label for decision id {obj.get('id')!r}")
            conf.append(float(obj["confidence"]))
            labels.append(by_id[obj["id"]])
            answered.append(obj["decision"] == pipeline.ANSWER)
    return np.array(conf), label_values(labels), np.array(answered, dtype=bool)


def cmd_eval(args) -> int:
    c, r, answered = _eval_inputs(args)
    if c.size == 0:
        raise LineError(0, "no rows to evaluate")
    level = args.alpha if args.alpha is not None else (args.rho if args.rho is not None else 0.05)
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, 0))
    out = summary(c, r, answered, rho=level, alpha=level, B=args.bootstrap, seed=seed)
    cfg_hash = RunConfig.load(args.config).config_hash() if args.config else None
    out["config_hash"] = cfg_hash
    paths = [_out(args, "summary.json"), _out(args, "rc_curve.csv"), _out(args, "reliability.csv")]
    pipeline.atomic_write(paths[0], pipeline.canonical_json(out))
    pipeline.atomic_write(paths[1], rc_curve(c, r).to_csv())
    pipeline.atomic_write(paths[2], reliability_csv(c, r))
    _manifest(args, "eval", cfg_hash, [p.name for p in paths])
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        with open(args.spec, encoding="utf-8") as fh:
            spec = ValiditySpec.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"cannot read simulation spec: {exc}") from exc
    seed = args.seed if args.seed is not None else os.environ.get(SEED_ENV)
    if seed is not None:
        spec = replace(spec, seed=int(seed))
    level = args.alpha if args.alpha is not None else args.rho
    if level is not None:
        spec = replace(spec, alpha=level)
    report = simulate_validity(spec)
    report.pop("runtime_seconds")  # keep the report reproducible byte for byte
    spec_hash = hashlib.sha256(pipeline.canonical_json(spec.to_dict()).encode()).hexdigest()
    report["config_hash"] = spec_hash
    path = _out(args, "validity_report.json")
    pipeline.atomic_write(path, pipeline.canonical_json(report))
    _manifest(args, "simulate", spec_hash, [path.name])
    return EXIT_OK


def _common(p):
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help=f"overrides {SEED_ENV} and the config seed")
    lv = p.add_mutually_exclusive_group()
    lv.add_argument("--alpha", type=float, help="risk level for conformal modes")
    lv.add_argument("--rho", type=float, help="risk level for validation mode")
    p.add_argument("--mode", choices=["validation", "conformal", "bucketed"])
    p.add_argument("--api-only", "--k-features", dest="api_only", action="store_true",
                   help="drop log-prob and entropy features")
    p.add_argument("--out-dir", default=".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unicr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="records.jsonl -> features.jsonl")
    p.add_argument("records")
    _common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="records.jsonl -> artifact.json")
    p.add_argument("records")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="artifact.json + records.jsonl -> decisions.jsonl")
    p.add_argument("artifact")
    p.add_argument("records")
    _common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="summary.json, rc_curve.csv, reliability.csv")
    p.add_argument("--decisions")
    p.add_argument("--records", help="labelled records joined to --decisions by id")
    p.add_argument("--scores", help="JSONL rows with confidence and label")
    p.add_argument("--bootstrap", type=int, default=1000)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="spec.json -> validity_report.json")
    p.add_argument("spec")
    _common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def _exit_code(exc) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    return EXIT_CONFIG if isinstance(cause, ConfigError) else EXIT_DATA


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UnicrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
