"""Dense ReLU network trained with Adam on softmax cross-entropy."""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateLabels, ShapeMismatch
from .gbdt import TrainLog

FORMAT = "pesentry-mlp"
FORMAT_VERSION = 1
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class MlpConfig:
    hidden_sizes: tuple[int, ...] = (512, 128)
    activation: str = "relu"
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    patience: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("need at least one hidden layer of positive width")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def layer_sizes(self, n_in: int, n_out: int) -> list[int]:
        return [n_in, *self.hidden_sizes, n_out]


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    label_schema: list[str]
    config: MlpConfig

    def __post_init__(self):
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeMismatch("layer dimensions do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ShapeMismatch("bias width does not match its layer")
        if self.mean.shape != (self.input_width,) or self.std.shape != (self.input_width,):
            raise ShapeMismatch("standardizer width does not match the input layer")
        if np.any(self.std <= 0):
            raise ValueError("standardizer stddev entries must be positive")

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_width] + [w.shape[1] for w in self.weights]

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def forward(self, X: np.ndarray) -> list[np.ndarray]:
        """Activations per layer; the last entry holds softmax probabilities."""
        acts = [self.standardize(X)]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(np.maximum(z, 0.0) if i < len(self.weights) - 1 else _softmax(z))
        return acts

    def predict_proba(self, X) -> np.ndarray:
        X = _check_matrix(X, self.input_width)
        return self.forward(X)[-1]

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "label_schema": list(self.label_schema),
            "layer_sizes": self.layer_sizes,
            "weights": [_encode(w) for w in self.weights],
            "biases": [_encode(b) for b in self.biases],
            "mean": _encode(self.mean),
            "std": _encode(self.std),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> MlpModel:
        if doc.get("format") != FORMAT or doc.get("version") != FORMAT_VERSION:
            raise ValueError("not a pesentry MLP document")
        sizes = doc["layer_sizes"]
        weights = [_decode(s, (a, b)) for s, a, b in zip(doc["weights"], sizes, sizes[1:])]
        biases = [_decode(s, (b,)) for s, b in zip(doc["biases"], sizes[1:])]
        cfg = dict(doc["config"])
        cfg["hidden_sizes"] = tuple(cfg["hidden_sizes"])
        return cls(
            weights=weights,
            biases=biases,
            mean=_decode(doc["mean"], (sizes[0],)),
            std=_decode(doc["std"], (sizes[0],)),
            label_schema=list(doc["label_schema"]),
            config=MlpConfig(**cfg),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape: tuple[int, ...]) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64).reshape(shape)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_matrix(X, width: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D feature matrix, got shape {X.shape}")
    if width is not None and X.shape[1] != width:
        raise ShapeMismatch(f"model expects {width} features, got {X.shape[1]}")
    return X


def fit_standardizer(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population stddev; constant features get stddev 1."""
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[X.min(axis=0) == X.max(axis=0)] = 1.0
    return mean, std


def init_params(sizes: list[int], rng: np.random.Generator) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """He-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def cross_entropy(probs: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(y)), y], PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(np.log(p)))


def mlp_loss_and_gradients(model: MlpModel, batch_features, batch_labels) -> tuple[float, dict]:
    """Mean cross-entropy and its gradients w.r.t. every weight and bias.

    Returns ``(loss, {"weights": [...], "biases": [...]})`` aligned with the model's layers.
    """
    X = _check_matrix(batch_features, model.input_width)
    y = np.asarray(batch_labels, dtype=np.int64)
    if X.shape[0] == 0 or y.shape != (X.shape[0],):
        raise ShapeMismatch("batch must be non-empty with one label per row")
    acts = model.forward(X)
    probs = acts[-1]
    loss = cross_entropy(probs, y)

    delta = probs.copy()
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    gw, gb = [], []
    for i in range(len(model.weights) - 1, -1, -1):
        gw.append(acts[i].T @ delta)
        gb.append(delta.sum(axis=0))
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return loss, {"weights": gw[::-1], "biases": gb[::-1]}


class Adam:
    def __init__(self, params: list[np.ndarray], cfg: MlpConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.adam_beta1 ** self.t
        c2 = 1.0 - cfg.adam_beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * g * g
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)


def mlp_train(
    features,
    labels,
    config: MlpConfig = MlpConfig(),
    validation: tuple | None = None,
    label_schema: list[str] | None = None,
    num_classes: int | None = None,
) -> tuple[MlpModel, TrainLog]:
    X = _check_matrix(features)
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ShapeMismatch(f"{X.shape[0]} feature rows but labels of shape {y.shape}")
    if X.shape[0] < 2 or X.shape[1] < 1:
        raise ShapeMismatch("need at least 2 rows and 1 feature")
    y = y.astype(np.int64)
    C = num_classes or (len(label_schema) if label_schema else int(y.max()) + 1)
    if y.min() < 0 or y.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    missing = sorted(set(range(C)) - set(np.unique(y).tolist()))
    if C < 2 or missing:
        raise DegenerateLabels(f"classes absent from training labels: {missing}")
    schema = list(label_schema) if label_schema else [str(i) for i in range(C)]
    if len(schema) != C:
        raise ShapeMismatch("label_schema length must equal the number of classes")

    rng = np.random.default_rng(config.seed)
    mean, std = fit_standardizer(X)
    weights, biases = init_params(config.layer_sizes(X.shape[1], C), rng)
    model = MlpModel(weights, biases, mean, std, schema, config)
    params = [*model.weights, *model.biases]
    opt = Adam(params, config)
    n_layers = len(weights)

    log = TrainLog()
    if validation is not None:
        Xv = _check_matrix(validation[0], X.shape[1])
        yv = np.asarray(validation[1], dtype=np.int64)
        log.val_loss = []
    best_val, best_params, since_best = np.inf, None, 0

    for _ in range(config.epochs):
        perm = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], config.batch_size):
            idx = perm[start:start + config.batch_size]
            _, grads = mlp_loss_and_gradients(model, X[idx], y[idx])
            opt.step([*grads["weights"], *grads["biases"]])
        log.train_loss.append(cross_entropy(model.forward(X)[-1], y))
        if validation is None:
            continue
        vl = cross_entropy(model.forward(Xv)[-1], yv)
        log.val_loss.append(vl)
        if config.patience is None:
            continue
        if vl < best_val:
            best_val, since_best = vl, 0
            best_params = [p.copy() for p in params]
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    if best_params is not None and since_best > 0:
        for p, best in zip(params, best_params):
            p[...] = best
    model.weights, model.biases = params[:n_layers], params[n_layers:]
    return model, log


def mlp_predict_proba(model: MlpModel, features) -> np.ndarray:
    return model.predict_proba(features)
