"""Calibration head: a small logistic or two-layer GELU model mapping feature
vectors to a probability of correctness, with a learned temperature on the
logit-derived inputs.

Parameters are kept as one flat vector during fitting:

* logistic: ``[w (d), b, log_T]``
* mlp2:     ``[W1 (h*d, row-major), b1 (h), w2 (h), b2, log_T]``
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .errors import DegenerateLabels, InsufficientData, InvalidSignal, SchemaError
from .evidence import LOGIT_FEATURES, FeatureVector, feature_matrix
from .isotonic import IsotonicMap
from .metrics import ece, label_values
from .objective import bce_from_logits, smooth_coverage_penalty, smooth_selective_loss, soft_adaptive_ece

MIN_TRAIN = 20
CLAMP = 1e-6
HEAD_KINDS = ("logistic", "mlp2")


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "logistic"
    hidden: int = 16
    alpha: float = 0.1          # weight of the soft adaptive ECE term
    beta: float = 1.0           # coverage-shortfall weight inside the selective term
    kappa: float = 0.8          # target coverage for the selective term
    selective_weight: float = 0.0
    working_tau: float | None = None
    smoothing_weight: float = 0.0
    smoothing_delta: float = 0.05
    l2_lambda: float = 1e-4
    max_iter: int = 500
    tol: float = 1e-7
    patience: int = 20
    check_every: int = 5
    seed: int = 0
    isotonic: bool | None = None  # None: on for mlp2, off for logistic

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise InvalidSignal(f"unknown head kind {self.kind!r}")
        if self.alpha < 0 or self.beta < 0 or self.l2_lambda < 0:
            raise InvalidSignal("alpha, beta and l2_lambda must be non-negative")
        if not 0 <= self.kappa <= 1:
            raise InvalidSignal("kappa must lie in [0, 1]")

    @property
    def use_isotonic(self) -> bool:
        return self.kind == "mlp2" if self.isotonic is None else bool(self.isotonic)


@dataclass(frozen=True)
class HeadModel:
    kind: str
    schema: tuple[str, ...]
    weights: tuple[float, ...]
    temperature: float
    feature_mean: tuple[float, ...]
    feature_scale: tuple[float, ...]
    hidden: int = 0
    l2_lambda: float = 0.0
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidSignal("temperature must be positive")
        d = len(self.schema)
        if len(self.weights) != n_weights(self.kind, d, self.hidden):
            raise InvalidSignal(f"{len(self.weights)} weights do not fit a {self.kind} head with d={d}")
        if len(self.feature_mean) != d or len(self.feature_scale) != d:
            raise InvalidSignal("standardization constants do not match schema")

    @property
    def d(self) -> int:
        return len(self.schema)

    def theta(self) -> np.ndarray:
        return np.r_[np.asarray(self.weights, dtype=float), np.log(self.temperature)]

    def logits(self, X: np.ndarray) -> np.ndarray:
        ctx = _Context(self.kind, self.d, self.hidden, _logit_mask(self.schema),
                       np.asarray(self.feature_mean), np.asarray(self.feature_scale), 0.0)
        return _forward(self.theta(), ctx, X)[0]

    def raw_coefficients(self) -> tuple[np.ndarray, float]:
        """Logistic slope and intercept in raw (unstandardized) feature units."""
        if self.kind != "logistic":
            raise InvalidSignal("raw coefficients are only defined for the logistic head")
        w = np.asarray(self.weights[:-1]) / np.asarray(self.feature_scale)
        w = np.where(_logit_mask(self.schema), w / self.temperature, w)
        b = self.weights[-1] - float(w @ np.asarray(self.feature_mean))
        return w, b

    def to_dict(self) -> dict:
        return {"kind": self.kind, "schema": list(self.schema), "weights": list(self.weights),
                "temperature": self.temperature, "feature_mean": list(self.feature_mean),
                "feature_scale": list(self.feature_scale), "hidden": self.hidden,
                "l2_lambda": self.l2_lambda, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "HeadModel":
        return cls(kind=data["kind"], schema=tuple(data["schema"]), weights=tuple(data["weights"]),
                   temperature=data["temperature"], feature_mean=tuple(data["feature_mean"]),
                   feature_scale=tuple(data["feature_scale"]), hidden=data["hidden"],
                   l2_lambda=data["l2_lambda"], seed=data["seed"])


def n_weights(kind, d, hidden):
    if kind == "logistic":
        return d + 1
    return hidden * d + hidden + hidden + 1


def _logit_mask(schema):
    return np.array([name in LOGIT_FEATURES for name in schema], dtype=bool)


# --------------------------------------------------------------------------
# forward / backward

@dataclass
class _Context:
    kind: str
    d: int
    hidden: int
    logit_mask: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    l2: float


def _gelu(a):
    cdf = 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
    return a * cdf, cdf + a * pdf


def _inputs(theta, ctx, X):
    T = np.exp(theta[-1])
    xhat = (X - ctx.mean) / ctx.scale
    xt = np.where(ctx.logit_mask, xhat / T, xhat)
    return xt


def _forward(theta, ctx, X):
    xt = _inputs(theta, ctx, X)
    d, h = ctx.d, ctx.hidden
    if ctx.kind == "logistic":
        s = xt @ theta[:d] + theta[d]
        return s, (xt,)
    W1 = theta[: h * d].reshape(h, d)
    b1 = theta[h * d: h * d + h]
    w2 = theta[h * d + h: h * d + 2 * h]
    b2 = theta[h * d + 2 * h]
    a = xt @ W1.T + b1
    act, dact = _gelu(a)
    s = act @ w2 + b2
    return s, (xt, a, act, dact)


def _backward(theta, ctx, cache, ds):
    """Gradient of sum(ds * s) with respect to theta."""
    d, h = ctx.d, ctx.hidden
    grad = np.zeros_like(theta)
    xt = cache[0]
    if ctx.kind == "logistic":
        grad[:d] = xt.T @ ds
        grad[d] = ds.sum()
        dxt = np.outer(ds, theta[:d])
    else:
        _, a, act, dact = cache
        W1 = theta[: h * d].reshape(h, d)
        w2 = theta[h * d + h: h * d + 2 * h]
        grad[h * d + h: h * d + 2 * h] = act.T @ ds
        grad[h * d + 2 * h] = ds.sum()
        da = np.outer(ds, w2) * dact
        grad[: h * d] = (da.T @ xt).ravel()
        grad[h * d: h * d + h] = da.sum(axis=0)
        dxt = da @ W1
    # d xt_j / d log_T = -xt_j on logit-derived columns
    grad[-1] = -np.sum(dxt[:, ctx.logit_mask] * xt[:, ctx.logit_mask])
    return grad


def _l2_slices(ctx, theta):
    d, h = ctx.d, ctx.hidden
    mask = np.zeros_like(theta, dtype=bool)
    if ctx.kind == "logistic":
        mask[:d] = True
    else:
        mask[: h * d] = True
        mask[h * d + h: h * d + 2 * h] = True
    return mask


def objective(theta, ctx, X, r, cfg: HeadConfig):
    """Full training objective and its gradient in the flat parameters."""
    s, cache = _forward(theta, ctx, X)
    value, ds = bce_from_logits(s, r)
    c = expit(s)
    dc = np.zeros_like(c)
    if cfg.alpha > 0:
        v, g = soft_adaptive_ece(c, r)
        value += cfg.alpha * v
        dc += cfg.alpha * g
    tau = cfg.working_tau if cfg.working_tau is not None else 0.5
    if cfg.selective_weight > 0:
        v, g = smooth_selective_loss(c, r, tau, cfg.kappa, cfg.beta)
        value += cfg.selective_weight * v
        dc += cfg.selective_weight * g
    if cfg.smoothing_weight > 0:
        v, g = smooth_coverage_penalty(c, tau, cfg.smoothing_delta)
        value += cfg.smoothing_weight * v
        dc += cfg.smoothing_weight * g
    ds = ds + dc * c * (1 - c)
    grad = _backward(theta, ctx, cache, ds)
    mask = _l2_slices(ctx, theta)
    value += 0.5 * ctx.l2 * float(np.sum(theta[mask] ** 2))
    grad[mask] += ctx.l2 * theta[mask]
    return value, grad


# --------------------------------------------------------------------------
# fitting

def _standardization(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


def _init_theta(kind, d, hidden, base_logit, seed):
    rng = np.random.default_rng(seed)
    if kind == "logistic":
        return np.r_[np.zeros(d), base_logit, 0.0]
    W1 = rng.normal(scale=1.0 / np.sqrt(d), size=(hidden, d))
    b1 = np.zeros(hidden)
    w2 = rng.normal(scale=1.0 / np.sqrt(hidden), size=hidden)
    return np.r_[W1.ravel(), b1, w2, base_logit, 0.0]


def _as_matrix(features):
    if isinstance(features, np.ndarray):
        return np.atleast_2d(np.asarray(features, dtype=float)), None
    vecs = list(features)
    if vecs and isinstance(vecs[0], FeatureVector):
        return feature_matrix(vecs), vecs[0].schema
    return np.atleast_2d(np.asarray(vecs, dtype=float)), None


def fit_head(features, labels, config: HeadConfig | None = None, schema=None,
             tune=None, history: list | None = None) -> HeadModel:
    """Fit the head by full-batch gradient descent with backtracking.

    ``features`` is a list of :class:`FeatureVector` or an ``(n, d)`` array (then
    ``schema`` names the columns). ``tune`` is an optional ``(features, labels)``
    pair used for early stopping on tune-split NLL plus adaptive ECE. When
    ``history`` is a list, the objective after each accepted step is appended.
    """
    cfg = config or HeadConfig()
    X, vec_schema = _as_matrix(features)
    schema = tuple(schema or vec_schema or [f"x{j}" for j in range(X.shape[1])])
    r = label_values(labels)
    n, d = X.shape
    if len(schema) != d:
        raise SchemaError(f"schema names {len(schema)} columns, data has {d}")
    if n != r.size:
        raise InvalidSignal(f"{n} feature rows vs {r.size} labels")
    if n < MIN_TRAIN:
        raise InsufficientData(f"head fit needs at least {MIN_TRAIN} examples, got {n}")
    if not np.all(np.isfinite(X)):
        raise InvalidSignal("non-finite features")

    hidden = cfg.hidden if cfg.kind == "mlp2" else 0
    mean, scale = _standardization(X)
    p = float(np.clip(r.mean(), 0.5 / n, 1 - 0.5 / n))
    base_logit = float(np.log(p / (1 - p)))
    theta = _init_theta(cfg.kind, d, hidden, base_logit, cfg.seed)

    def model_from(th):
        return HeadModel(kind=cfg.kind, schema=schema, weights=tuple(float(v) for v in th[:-1]),
                         temperature=float(np.exp(th[-1])), feature_mean=tuple(mean.tolist()),
                         feature_scale=tuple(scale.tolist()), hidden=hidden,
                         l2_lambda=cfg.l2_lambda, seed=cfg.seed)

    if np.all(r == r[0]) and r[0] in (0.0, 1.0):
        warnings.warn(DegenerateLabels("all labels equal; fitting an intercept-only head"))
        theta[:] = 0.0
        n_w = n_weights(cfg.kind, d, hidden)
        theta[n_w - 1] = base_logit
        return model_from(theta)

    ctx = _Context(cfg.kind, d, hidden, _logit_mask(schema), mean, scale, cfg.l2_lambda)
    monitor = _EarlyStopping(tune, cfg, model_from) if tune is not None else None
    theta = _descend(theta, ctx, X, r, cfg, monitor, history)
    if monitor is not None and monitor.best_theta is not None:
        theta = monitor.best_theta
    return model_from(theta)


class _EarlyStopping:
    def __init__(self, tune, cfg, model_from):
        Xt, _ = _as_matrix(tune[0])
        self.X = Xt
        self.r = label_values(tune[1])
        self.cfg = cfg
        self.model_from = model_from
        self.best = np.inf
        self.best_theta = None
        self.stale = 0

    def update(self, theta) -> bool:
        """Record a checkpoint; return True when training should stop."""
        c = np.clip(expit(self.model_from(theta).logits(self.X)), CLAMP, 1 - CLAMP)
        r = self.r
        score = float(-np.mean(r * np.log(c) + (1 - r) * np.log1p(-c))) + ece(c, r, "adaptive15")
        if score < self.best - 1e-9:
            self.best, self.best_theta, self.stale = score, theta.copy(), 0
        else:
            self.stale += 1
        return self.stale >= self.cfg.patience


def _descend(theta, ctx, X, r, cfg, monitor, history):
    armijo = 1e-4
    value, grad = objective(theta, ctx, X, r, cfg)
    step = 1.0
    prev = None
    for it in range(cfg.max_iter):
        gnorm2 = float(grad @ grad)
        if gnorm2 < cfg.tol ** 2:
            break
        if prev is not None:
            # Barzilai-Borwein trial step, safeguarded by the backtracking test below
            s_vec, y_vec = theta - prev[0], grad - prev[1]
            sy = float(s_vec @ y_vec)
            if sy > 1e-16:
                step = min(max(float(s_vec @ s_vec) / sy, 1e-6), 1e3)
        for _ in range(50):
            cand = theta - step * grad
            cval, cgrad = objective(cand, ctx, X, r, cfg)
            if np.isfinite(cval) and cval <= value - armijo * step * gnorm2:
                break
            step *= 0.5
        else:
            break
        prev = (theta, grad)
        improvement = value - cval
        theta, value, grad = cand, cval, cgrad
        if history is not None:
            history.append(value)
        if improvement <= 1e-12 * max(1.0, abs(value)):
            break
        if monitor is not None and (it + 1) % cfg.check_every == 0 and monitor.update(theta):
            break
    if monitor is not None:
        monitor.update(theta)
    return theta


# --------------------------------------------------------------------------
# prediction

def _check_schema(model: HeadModel, schema):
    if schema is not None and tuple(schema) != model.schema:
        raise SchemaError(f"feature schema {tuple(schema)} does not match model schema {model.schema}")


def predict_batch(model: HeadModel, iso: IsotonicMap | None, features, schema=None) -> np.ndarray:
    X, vec_schema = _as_matrix(features)
    _check_schema(model, vec_schema if vec_schema is not None else schema)
    if X.shape[1] != model.d:
        raise SchemaError(f"expected {model.d} features, got {X.shape[1]}")
    c = expit(model.logits(X))
    if iso is not None:
        c = np.asarray(iso(c), dtype=float)
    return np.clip(c, CLAMP, 1 - CLAMP)


def predict_confidence(model: HeadModel, iso: IsotonicMap | None, z) -> float:
    if isinstance(z, FeatureVector):
        return float(predict_batch(model, iso, [z])[0])
    return float(predict_batch(model, iso, np.asarray(z, dtype=float)[None, :])[0])
