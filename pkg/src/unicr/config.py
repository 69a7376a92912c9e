"""Run configuration: nested dataclasses loaded from JSON with unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from .errors import ConfigError, InvalidSignal
from .evidence import FeatureConfig
from .head import HeadConfig
from .risk import POLICY_MODES, SMOOTHING, MIN_BUCKET_SIZE


@dataclass(frozen=True)
class PolicyConfig:
    mode: str = "conformal"
    level: float = 0.05          # alpha for conformal modes, rho for validation
    bucket_edges: tuple[float, ...] = (0.5,)
    smoothing: str = "none"
    min_bucket_size: int = MIN_BUCKET_SIZE

    def __post_init__(self):
        mode = "conformal_bucketed" if self.mode == "bucketed" else self.mode
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "bucket_edges", tuple(float(e) for e in self.bucket_edges))
        if mode not in POLICY_MODES:
            raise ConfigError(f"unknown policy mode {self.mode!r}")
        if self.smoothing not in SMOOTHING:
            raise ConfigError(f"unknown smoothing {self.smoothing!r}")
        lo_ok = self.level >= 0 if mode == "validation" else self.level > 0
        hi_ok = self.level <= 1 if mode == "validation" else self.level < 1
        if not (lo_ok and hi_ok):
            raise ConfigError(f"level {self.level} out of range for mode {mode}")


@dataclass(frozen=True)
class DecisionConfig:
    retry_margin: float = 0.05
    retry_coverage: float = 0.5
    coverage_threshold: float = 0.5
    dispersion_threshold: float = 0.5
    verifier_threshold: float = 0.5
    tool_threshold: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    drop_missing_families: bool = True
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))

    def to_dict(self) -> dict:
        return _to_plain(self)

    def config_hash(self) -> str:
        data = self.to_dict()
        data.pop("paths", None)
        return hashlib.sha256(json.dumps(data, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_plain(cls, data, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def with_overrides(self, seed=None, level=None, mode=None, api_only=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if level is not None or mode is not None:
            cfg = replace(cfg, policy=replace(cfg.policy, level=cfg.policy.level if level is None else level,
                                              mode=cfg.policy.mode if mode is None else mode))
        if api_only:
            cfg = replace(cfg, features=replace(cfg.features, api_only=True))
        return cfg


def _to_plain(obj):
    if is_dataclass(obj):
        if hasattr(obj, "to_dict") and not isinstance(obj, RunConfig):
            return obj.to_dict()
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


_NESTED = {"features": FeatureConfig, "head": HeadConfig, "policy": PolicyConfig, "decision": DecisionConfig}


def _from_plain(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(key) if cls is RunConfig else None
        kwargs[key] = _from_plain(sub, value, f"{where}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, InvalidSignal) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
