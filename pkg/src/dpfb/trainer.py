"""DP-SGD training of small multilabel models with an AdamW update.

Models are linear or one-hidden-layer tanh networks with a sigmoid output
per label, stored as one flat parameter vector. Layout, row-major:

    linear:  W (d x K), b (K)
    hidden:  W1 (d x h), b1 (h), W2 (h x K), b2 (K)

One step of :func:`train` is Poisson sampling, per-sample gradients,
l2 clipping to ``clip_norm``, a Gaussian-noised sum divided by the nominal
batch size, and an AdamW update.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from dpfb.accountant import DEFAULT_DELTA, PrivacyParams, PrivacySpend, epsilon_for
from dpfb.data import Cohort, dumps_report
from dpfb.errors import NumericError, ParameterError, TrainingError
from dpfb.metrics import PredictionTable

CLIP_SLACK = 1e-9


@dataclass
class Model:
    params: np.ndarray
    input_dim: int
    hidden_dim: int
    label_count: int

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (param_count(self.input_dim, self.hidden_dim, self.label_count),):
            raise ParameterError(
                f"expected {param_count(self.input_dim, self.hidden_dim, self.label_count)} "
                f"parameters, got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise NumericError("model parameters must be finite")

    def copy(self) -> Model:
        return replace(self, params=self.params.copy())

    def unpack(self, params=None):
        p = self.params if params is None else params
        d, h, k = self.input_dim, self.hidden_dim, self.label_count
        if h == 0:
            return p[:d * k].reshape(d, k), p[d * k:]
        W1 = p[:d * h].reshape(d, h)
        b1 = p[d * h:d * h + h]
        off = d * h + h
        return W1, b1, p[off:off + h * k].reshape(h, k), p[off + h * k:]

    def shape_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                "label_count": self.label_count}


def param_count(d: int, h: int, k: int) -> int:
    return d * h + h + h * k + k if h > 0 else d * k + k


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    nominal_batch: int = 128
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    max_steps: int = 500
    delta: float = DEFAULT_DELTA
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    class_weights: list[float] | None = None  # None: inverse prevalence of the training set
    hidden_dim: int = 0

    def __post_init__(self):
        if self.nominal_batch < 1 or self.max_steps < 0:
            raise ParameterError("nominal_batch must be >= 1 and max_steps >= 0")
        if self.noise_multiplier < 0:
            raise ParameterError("noise_multiplier must be non-negative")
        if not self.clip_norm > 0:
            raise ParameterError("clip_norm must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ParameterError("learning_rate must be positive and weight_decay non-negative")
        if self.class_weights is not None and not all(w > 0 for w in self.class_weights):
            raise ParameterError("class weights must be positive")

    @property
    def private(self) -> bool:
        return self.noise_multiplier > 0


@dataclass
class AdamState:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, theta) -> AdamState:
        theta = np.array(theta, dtype=np.float64)
        return cls(theta, np.zeros_like(theta), np.zeros_like(theta), 0)


@dataclass
class TrainTrace:
    step: list[int] = field(default_factory=list)
    batch_size: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    grad_norm_q10: list[float] = field(default_factory=list)
    grad_norm_q50: list[float] = field(default_factory=list)
    grad_norm_q90: list[float] = field(default_factory=list)
    max_clipped_norm: float = 0.0
    sampling_prob: float = 0.0
    spend: PrivacySpend | None = None

    @property
    def epsilon(self) -> float:
        return math.inf if self.spend is None else self.spend.epsilon

    def summary(self) -> dict:
        return {"steps": len(self.step),
                "final_loss": self.loss[-1] if self.loss else None,
                "mean_batch_size": float(np.mean(self.batch_size)) if self.batch_size else 0.0,
                "median_grad_norm": float(np.median(self.grad_norm_q50)) if self.step else None,
                "max_clipped_norm": self.max_clipped_norm,
                "sampling_prob": self.sampling_prob,
                "epsilon": self.epsilon,
                "optimal_order": None if self.spend is None else self.spend.optimal_order}


# ---------------------------------------------------------------- model maths

def cold_start(input_dim: int, hidden_dim: int, label_count: int, seed: int) -> Model:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=fan_in * fan_out)

    d, h, k = input_dim, hidden_dim, label_count
    if h == 0:
        parts = [glorot(d, k), np.zeros(k)]
    else:
        parts = [glorot(d, h), np.zeros(h), glorot(h, k), np.zeros(k)]
    return Model(np.concatenate(parts), d, h, k)


def _logits(model: Model, X: np.ndarray, params=None):
    if model.hidden_dim == 0:
        W, b = model.unpack(params)
        return X @ W + b, None
    W1, b1, W2, b2 = model.unpack(params)
    hidden = np.tanh(X @ W1 + b1)
    return hidden @ W2 + b2, hidden


def _check_dim(model: Model, X: np.ndarray):
    if X.shape[-1] != model.input_dim:
        raise ParameterError(f"expected {model.input_dim} features, got {X.shape[-1]}")


def forward(model: Model, features) -> np.ndarray:
    """Per-label sigmoid scores for one feature vector or a batch of rows."""
    X = np.asarray(features, dtype=np.float64)
    _check_dim(model, X)
    z, _ = _logits(model, np.atleast_2d(X))
    p = expit(z)
    return p[0] if X.ndim == 1 else p


def weighted_bce(model: Model, X, Y, class_weights) -> np.ndarray:
    """Per-sample sum over labels of w_k * BCE(sigmoid(z_k), y_k)."""
    z, _ = _logits(model, np.atleast_2d(X))
    Y = np.atleast_2d(Y)
    nll = -(Y * log_expit(z) + (1 - Y) * log_expit(-z))
    return nll @ np.asarray(class_weights, dtype=np.float64)


def per_sample_grads(model: Model, X, Y, class_weights) -> np.ndarray:
    """Analytic gradient of :func:`weighted_bce` for every row, shape (B, P)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    _check_dim(model, X)
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (model.label_count,) or np.any(w <= 0):
        raise ParameterError("need one positive class weight per label")
    z, hidden = _logits(model, X)
    dz = (expit(z) - Y) * w  # (B, K)
    B = X.shape[0]
    if model.hidden_dim == 0:
        dW = np.einsum("bi,bk->bik", X, dz).reshape(B, -1)
        G = np.concatenate([dW, dz], axis=1)
    else:
        _, _, W2, _ = model.unpack()
        dW2 = np.einsum("bi,bk->bik", hidden, dz).reshape(B, -1)
        da = (dz @ W2.T) * (1.0 - hidden ** 2)
        dW1 = np.einsum("bi,bj->bij", X, da).reshape(B, -1)
        G = np.concatenate([dW1, da, dW2, dz], axis=1)
    if not np.all(np.isfinite(G)):
        raise NumericError("non-finite per-sample gradient")
    return G


def per_sample_grad(model: Model, features, labels, class_weights) -> np.ndarray:
    return per_sample_grads(model, features, labels, class_weights)[0]


# ---------------------------------------------------------------- DP-SGD pieces

def clip(grad, clip_norm: float) -> np.ndarray:
    """Scale ``grad`` down to l2 norm ``clip_norm`` if it is longer."""
    return clip_rows(np.atleast_2d(grad), clip_norm)[0]


def clip_rows(G: np.ndarray, clip_norm: float) -> np.ndarray:
    if not clip_norm > 0:
        raise ParameterError("clip norm must be positive")
    if math.isinf(clip_norm):
        return G
    norms = np.linalg.norm(G, axis=1)
    scale = np.minimum(1.0, clip_norm / np.where(norms > 0, norms, 1.0))
    return G * scale[:, None]


def noisy_mean(clipped: np.ndarray, sigma: float, clip_norm: float, nominal_batch: int,
               rng: np.random.Generator, dim: int | None = None) -> np.ndarray:
    """(sum of clipped gradients + N(0, sigma^2 C^2 I)) / nominal_batch.

    The divisor is the nominal batch size, never the realised one, so an
    empty Poisson batch yields pure noise (or zeros when ``sigma == 0``).
    """
    clipped = np.asarray(clipped, dtype=np.float64)
    if dim is None:
        dim = clipped.shape[-1]
    total = clipped.sum(axis=0) if len(clipped) else np.zeros(dim)
    if sigma > 0:
        total = total + rng.normal(0.0, sigma * clip_norm, size=dim)
    return total / nominal_batch


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < q <= 1:
        raise ParameterError(f"sampling probability must be in (0, 1], got {q}")
    return np.flatnonzero(rng.random(n) < q)


def adamw_step(state: AdamState, grad: np.ndarray, config: TrainConfig) -> AdamState:
    """Bias-corrected Adam with decoupled weight decay."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    theta = state.theta - config.learning_rate * (
        m_hat / (np.sqrt(v_hat) + config.adam_eps) + config.weight_decay * state.theta)
    if not np.all(np.isfinite(theta)):
        raise NumericError(f"non-finite AdamW update at step {t}")
    return AdamState(theta, m, v, t)


def inverse_prevalence_weights(labels: np.ndarray) -> list[float]:
    """Per-label weights proportional to 1 / prevalence, normalised to mean 1."""
    prev = np.asarray(labels, dtype=np.float64).mean(axis=0)
    if np.any(prev == 0):
        raise ParameterError("a label has no positives; cannot weight by inverse prevalence")
    inv = 1.0 / prev
    return (inv / inv.mean()).tolist()


# ---------------------------------------------------------------- training

def _dp_step(step, state, model, X, Y, weights, q, config, rng, trace) -> AdamState:
    C, sigma = config.clip_norm, config.noise_multiplier
    P = len(state.theta)
    idx = poisson_sample(len(X), q, rng)
    model.params = state.theta
    if len(idx):
        G = per_sample_grads(model, X[idx], Y[idx], weights)
        norms = np.linalg.norm(G, axis=1)
        G = clip_rows(G, C)
        clipped = float(np.linalg.norm(G, axis=1).max())
        assert clipped <= C + CLIP_SLACK, f"clipped norm {clipped} exceeds {C} at step {step}"
        loss = float(weighted_bce(model, X[idx], Y[idx], weights).mean())
        q10, q50, q90 = np.quantile(norms, [0.1, 0.5, 0.9])
        trace.max_clipped_norm = max(trace.max_clipped_norm, clipped)
    else:
        G = np.zeros((0, P))
        loss, q10, q50, q90 = math.nan, 0.0, 0.0, 0.0
    grad = noisy_mean(G, sigma, C, config.nominal_batch, rng, dim=P)
    trace.step.append(step)
    trace.batch_size.append(len(idx))
    trace.loss.append(loss)
    trace.grad_norm_q10.append(float(q10))
    trace.grad_norm_q50.append(float(q50))
    trace.grad_norm_q90.append(float(q90))
    if len(idx) and not math.isfinite(loss):
        raise NumericError("loss is not finite")
    return adamw_step(state, grad, config)


def train(cohort: Cohort, config: TrainConfig, init: Model) -> tuple[Model, TrainTrace]:
    """Run ``config.max_steps`` DP-SGD steps from ``init`` on every row of ``cohort``."""
    X, Y = cohort.features, cohort.labels.astype(np.float64)
    n = len(cohort)
    if (init.input_dim, init.label_count) != (cohort.feature_dim, cohort.label_count):
        raise ParameterError("initial model does not match the cohort dimensions")
    if config.nominal_batch > n:
        raise ParameterError(f"nominal batch {config.nominal_batch} exceeds dataset size {n}")
    weights = (config.class_weights if config.class_weights is not None
               else inverse_prevalence_weights(Y))
    q = config.nominal_batch / n
    sigma = config.noise_multiplier
    if sigma > 0 and math.isinf(config.clip_norm):
        raise ParameterError("a finite clip norm is required when noise is added")

    rng = np.random.default_rng(config.seed)
    model = init.copy()
    state = AdamState.fresh(model.params)
    trace = TrainTrace(sampling_prob=q)
    for step in range(config.max_steps):
        try:
            state = _dp_step(step, state, model, X, Y, weights, q, config, rng, trace)
        except NumericError as exc:
            raise TrainingError(f"step {step}: {exc}", trace) from exc

    model.params = state.theta
    if sigma > 0 and config.max_steps > 0:
        trace.spend = epsilon_for(PrivacyParams(sigma, q, config.max_steps, config.delta))
    return model, trace


def warm_start(source: Cohort, config: TrainConfig, pretrain_steps: int | None = None,
               init_seed: int | None = None) -> Model:
    """Non-private pretraining on a source cohort, starting from a cold init.

    ``pretrain_steps=0`` returns the cold init unchanged.
    """
    steps = config.max_steps if pretrain_steps is None else pretrain_steps
    seed = config.seed if init_seed is None else init_seed
    init = cold_start(source.feature_dim, config.hidden_dim, source.label_count, seed)
    if steps == 0:
        return init
    pre = replace(config, noise_multiplier=0.0, clip_norm=math.inf, max_steps=steps,
                  class_weights=None, seed=seed)
    model, _ = train(source, pre, init)
    return model


def predict(model: Model, cohort: Cohort) -> PredictionTable:
    return PredictionTable(cohort.patient_id, cohort.sex, cohort.age_group,
                           cohort.labels.astype(np.int8), forward(model, cohort.features),
                           cohort.label_names)


# ---------------------------------------------------------------- persistence

def save_model(model: Model, path, trace: TrainTrace | None = None,
               config: TrainConfig | None = None) -> dict:
    doc = {"shape": model.shape_dict(), "params": [float(x) for x in model.params]}
    if trace is not None:
        summary = trace.summary()
        doc["trace"] = summary
        doc["achieved_epsilon"] = summary["epsilon"]
    if config is not None:
        doc["config"] = asdict(config)
    Path(path).write_text(dumps_report(doc), encoding="utf-8")
    return doc


def load_model(path) -> Model:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        shape = doc["shape"]
        return Model(np.array(doc["params"], dtype=np.float64), int(shape["input_dim"]),
                     int(shape["hidden_dim"]), int(shape["label_count"]))
    except (KeyError, TypeError) as exc:
        raise ParameterError(f"{path}: not a model file ({exc})") from None
