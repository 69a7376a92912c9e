"""Calibrated answer-or-abstain decisions from fused uncertainty evidence."""

from .config import DecisionConfig, PolicyConfig, RunConfig
from .errors import (ArtifactError, ConfigError, DegenerateEvidence, DegenerateLabels, InsufficientData,
                     InvalidSignal, MissingSignal, SchemaError, StageError, UnicrError)
from .evidence import FeatureConfig, FeatureVector, assemble_features
from .head import HeadConfig, HeadModel, fit_head, predict_batch, predict_confidence
from .isotonic import IsotonicMap, fit_isotonic
from .pipeline import CalibrationArtifact, DecisionOutcome, SessionState, infer, load_artifact, save_artifact, train
from .records import ClaimScore, RawSignalsRecord, SampleRecord, VerifierFlag, read_records
from .risk import (ThresholdPolicy, bayes_threshold, conformal_threshold, selective_risk, soft_conformal_threshold,
                   validation_threshold)
from .targets import CorrectnessLabel

__version__ = "0.1.0"
