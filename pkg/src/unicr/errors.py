"""Exception and warning types shared across the package."""


class UnicrError(Exception):
    """Base class for all package errors."""


class MissingSignal(UnicrError):
    """A raw signal required by an enabled feature family is absent."""

    def __init__(self, message, family=None):
        super().__init__(message)
        self.family = family


class InvalidSignal(UnicrError):
    """A raw signal is present but violates its invariants."""


class DegenerateEvidence(UnicrError):
    """Evidence is structurally empty (e.g. no claims to score)."""


class InsufficientData(UnicrError):
    """Too few examples for the requested fit or split."""


class SchemaError(UnicrError):
    """Feature schema does not match the model or artifact."""


class ConfigError(UnicrError):
    """Invalid or unknown configuration."""


class ArtifactError(UnicrError):
    """Malformed artifact, version mismatch, or hash mismatch."""


class StageError(UnicrError):
    """Wraps a failure inside the training pipeline with the failing stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class DegenerateLabels(UserWarning):
    """Training labels carry a single class; an intercept-only head is fitted."""
