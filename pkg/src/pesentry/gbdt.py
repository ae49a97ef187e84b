"""Second-order gradient boosted decision trees with exact greedy splits.

Binary problems use logistic loss (one tree per round); multiclass problems
use softmax with one tree per class per round. Leaves take the Newton step
``-G / (H + lambda)`` shrunk by the learning rate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateLabels, ShapeMismatch

FORMAT = "pesentry-gbdt"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GbdtConfig:
    num_rounds: int = 200
    learning_rate: float = 0.1
    max_depth: int = 6
    min_samples_leaf: int = 20
    lambda_l2: float = 1.0
    feature_subsample: float = 1.0
    num_classes: int = 2
    seed: int = 0
    early_stopping_rounds: int | None = None

    def __post_init__(self):
        if self.num_rounds < 0:
            raise ValueError("num_rounds must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("max_depth and min_samples_leaf must be positive")
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be non-negative")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must be in (0, 1]")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


PRESETS = {
    "xgb-like": {},
    "lgbm-like": {"max_depth": 8, "min_samples_leaf": 20, "feature_subsample": 0.8},
}


def preset(name: str, **overrides) -> GbdtConfig:
    return GbdtConfig(**{**PRESETS[name], **overrides})


@dataclass(frozen=True)
class NoSplit:
    reason: str = "no admissible split with positive gain"


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return self.value[node]
            x = X[rows, np.where(active, f, 0)]
            nxt = np.where(x < self.threshold[node], self.left[node], self.right[node])
            node = np.where(active, nxt, node)

    @property
    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def to_nodes(self) -> list[list]:
        return [
            [int(f), float(t), int(lo), int(hi), float(v)]
            for f, t, lo, hi, v in zip(self.feature, self.threshold, self.left, self.right, self.value)
        ]

    @classmethod
    def from_nodes(cls, nodes: list[list]) -> Tree:
        cols = list(zip(*nodes))
        return cls(
            np.array(cols[0], dtype=np.int64),
            np.array(cols[1], dtype=np.float64),
            np.array(cols[2], dtype=np.int64),
            np.array(cols[3], dtype=np.int64),
            np.array(cols[4], dtype=np.float64),
        )


@dataclass
class GbdtModel:
    trees: list[list[Tree]]
    base_score: np.ndarray
    config: GbdtConfig
    label_schema: list[str]
    input_width: int

    @property
    def n_outputs(self) -> int:
        return 1 if self.config.num_classes == 2 else self.config.num_classes

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = _check_matrix(X, self.input_width)
        margins = np.tile(self.base_score, (X.shape[0], 1))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                margins[:, k] += tree.predict(X)
        return margins

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _probabilities(self.decision_function(X))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "label_schema": list(self.label_schema),
            "input_width": self.input_width,
            "base_score": [float(b) for b in self.base_score],
            "trees": [[t.to_nodes() for t in round_trees] for round_trees in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> GbdtModel:
        if doc.get("format") != FORMAT or doc.get("version") != FORMAT_VERSION:
            raise ValueError("not a pesentry GBDT document")
        return cls(
            trees=[[Tree.from_nodes(t) for t in r] for r in doc["trees"]],
            base_score=np.array(doc["base_score"], dtype=np.float64),
            config=GbdtConfig(**doc["config"]),
            label_schema=list(doc["label_schema"]),
            input_width=int(doc["input_width"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _check_matrix(X, width: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D feature matrix, got shape {X.shape}")
    if width is not None and X.shape[1] != width:
        raise ShapeMismatch(f"model expects {width} features, got {X.shape[1]}")
    return X


def _probabilities(margins: np.ndarray) -> np.ndarray:
    if margins.shape[1] == 1:
        p = 1.0 / (1.0 + np.exp(-margins[:, 0]))
        return np.column_stack([1.0 - p, p])
    z = margins - margins.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def training_loss(margins: np.ndarray, y: np.ndarray) -> float:
    """Mean logistic (binary) or softmax cross-entropy loss, computed stably."""
    if margins.shape[1] == 1:
        m = margins[:, 0]
        return float(np.mean(np.logaddexp(0.0, m) - y * m))
    mx = margins.max(axis=1)
    lse = mx + np.log(np.exp(margins - mx[:, None]).sum(axis=1))
    return float(np.mean(lse - margins[np.arange(len(y)), y]))


def _best_split(xs, gs, hs, lam, msl):
    """Best admissible split over the rows of sorted value matrix ``xs``.

    Position i puts the first i+1 sorted samples on the left. Only positions
    between distinct values with both children >= ``msl`` are scored. Ties go
    to the lowest row, then the lowest position. Returns (gain, row, pos) or
    None when nothing is admissible.
    """
    n = xs.shape[1]
    lo, hi = msl - 1, n - msl - 1
    if hi < lo:
        return None
    rows, offs = np.nonzero(xs[:, lo:hi + 1] < xs[:, lo + 1:hi + 2])
    if rows.size == 0:
        return None
    pos = offs + lo
    g_total, h_total = gs[rows, -1], hs[rows, -1]
    gl, hl = gs[rows, pos], hs[rows, pos]
    gain = gl ** 2 / (hl + lam) + (g_total - gl) ** 2 / (h_total - hl + lam) - g_total ** 2 / (h_total + lam)
    i = int(np.argmax(gain))
    return float(gain[i]), int(rows[i]), int(pos[i])


def _midpoint(a: float, b: float) -> float:
    t = (a + b) / 2.0
    # keep a < t <= b so "x < t" separates them even when the midpoint rounds down
    return t if t > a else b


def find_best_split(gradients, hessians, feature_column, config: GbdtConfig) -> tuple[float, float] | NoSplit:
    """Best threshold for one feature column; ties go to the smallest threshold."""
    x = np.asarray(feature_column, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    h = np.asarray(hessians, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order][None, :]
    gs = np.cumsum(g[order])[None, :]
    hs = np.cumsum(h[order])[None, :]
    res = _best_split(xs, gs, hs, config.lambda_l2, config.min_samples_leaf)
    if res is None:
        return NoSplit("no admissible split position")
    best, _, pos = res
    if not best > 0:
        return NoSplit()
    return float(_midpoint(xs[0, pos], xs[0, pos + 1])), best


class _TreeBuilder:
    def __init__(self, XT: np.ndarray, order: np.ndarray, feature_ids: np.ndarray, config: GbdtConfig):
        self.XT = XT  # (F, N) columns that vary on the training set
        self.order = order  # (F, N) per-column argsort of XT
        self.feature_ids = feature_ids  # column -> original feature index
        self.cfg = config

    def build(self, g: np.ndarray, h: np.ndarray, cols: np.ndarray) -> tuple[Tree, np.ndarray]:
        self.g, self.h = g, h
        self.nodes: list[list] = []
        self.train_out = np.zeros(g.shape[0])
        self._grow(self.order[cols], cols, 0)
        arr = np.array(self.nodes, dtype=object)
        tree = Tree(
            arr[:, 0].astype(np.int64), arr[:, 1].astype(np.float64),
            arr[:, 2].astype(np.int64), arr[:, 3].astype(np.int64), arr[:, 4].astype(np.float64),
        )
        return tree, self.train_out

    def _leaf(self, node_id: int, idx: np.ndarray):
        cfg = self.cfg
        value = -self.g[idx].sum() / (self.h[idx].sum() + cfg.lambda_l2) * cfg.learning_rate
        self.nodes[node_id] = [-1, 0.0, -1, -1, float(value)]
        self.train_out[idx] = value

    def _grow(self, ordT: np.ndarray, cols: np.ndarray, depth: int) -> int:
        node_id = len(self.nodes)
        self.nodes.append(None)
        cfg = self.cfg
        n = ordT.shape[1]
        idx = ordT[0]
        if depth >= cfg.max_depth or n < 2 * cfg.min_samples_leaf:
            self._leaf(node_id, idx)
            return node_id

        xs = self.XT[cols[:, None], ordT]
        varying = xs[:, 0] < xs[:, -1]
        if not varying.any():
            self._leaf(node_id, idx)
            return node_id
        if not varying.all():
            xs, ordT, cols = xs[varying], ordT[varying], cols[varying]
        gs = np.cumsum(self.g[ordT], axis=1)
        hs = np.cumsum(self.h[ordT], axis=1)
        res = _best_split(xs, gs, hs, cfg.lambda_l2, cfg.min_samples_leaf)
        if res is None or not res[0] > 0:
            self._leaf(node_id, idx)
            return node_id
        _, c, pos = res
        threshold = _midpoint(xs[c, pos], xs[c, pos + 1])
        go_left = self.XT[cols[c]] < threshold
        mask = go_left[ordT]
        n_left = pos + 1
        left_ord = ordT[mask].reshape(ordT.shape[0], n_left)
        right_ord = ordT[~mask].reshape(ordT.shape[0], n - n_left)
        feature = int(self.feature_ids[cols[c]])
        left = self._grow(left_ord, cols, depth + 1)
        right = self._grow(right_ord, cols, depth + 1)
        self.nodes[node_id] = [feature, threshold, left, right, 0.0]
        return node_id


def _validate_training(X, y, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    X = _check_matrix(X)
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ShapeMismatch(f"{X.shape[0]} feature rows but labels of shape {y.shape}")
    if X.shape[0] < 2 or X.shape[1] < 1:
        raise ShapeMismatch("need at least 2 rows and 1 feature")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    missing = sorted(set(range(num_classes)) - set(np.unique(y).tolist()))
    if missing:
        raise DegenerateLabels(f"classes absent from training labels: {missing}")
    return X, y


def gbdt_train(
    features,
    labels,
    config: GbdtConfig = GbdtConfig(),
    validation: tuple | None = None,
    label_schema: list[str] | None = None,
) -> tuple[GbdtModel, TrainLog]:
    X, y = _validate_training(features, labels, config.num_classes)
    n, d = X.shape
    K = 1 if config.num_classes == 2 else config.num_classes
    schema = list(label_schema) if label_schema else [str(i) for i in range(config.num_classes)]
    if len(schema) != config.num_classes:
        raise ShapeMismatch("label_schema length must equal num_classes")

    varying = np.flatnonzero(X.min(axis=0) < X.max(axis=0))
    XT = np.ascontiguousarray(X[:, varying].T)
    order = np.argsort(XT, axis=1, kind="stable")
    builder = _TreeBuilder(XT, order, varying, config)
    rng = np.random.default_rng(config.seed)

    base = np.zeros(K)
    margins = np.tile(base, (n, 1))
    onehot = np.eye(config.num_classes)[y]
    log = TrainLog()
    if validation is not None:
        Xv = _check_matrix(validation[0], d)
        yv = np.asarray(validation[1], dtype=np.int64)
        val_margins = np.tile(base, (Xv.shape[0], 1))
        log.val_loss = []
    trees: list[list[Tree]] = []
    best_val, since_best = np.inf, 0

    for _ in range(config.num_rounds):
        if varying.size == 0:
            break
        p = _probabilities(margins)
        round_trees = []
        for k in range(K):
            pk = p[:, 1] if K == 1 else p[:, k]
            yk = y if K == 1 else onehot[:, k]
            g = pk - yk
            h = pk * (1.0 - pk)
            if config.feature_subsample < 1.0:
                m = max(1, int(round(config.feature_subsample * varying.size)))
                cols = np.sort(rng.choice(varying.size, size=m, replace=False))
            else:
                cols = np.arange(varying.size)
            tree, out = builder.build(g, h, cols)
            round_trees.append(tree)
            margins[:, k] += out
            if validation is not None:
                val_margins[:, k] += tree.predict(Xv)
        trees.append(round_trees)
        log.train_loss.append(training_loss(margins, y))
        if validation is not None:
            vl = training_loss(val_margins, yv)
            log.val_loss.append(vl)
            if config.early_stopping_rounds is not None:
                if vl < best_val:
                    best_val, since_best = vl, 0
                else:
                    since_best += 1
                    if since_best >= config.early_stopping_rounds:
                        break

    model = GbdtModel(trees=trees, base_score=base, config=config, label_schema=schema, input_width=d)
    return model, log


def gbdt_predict_proba(model: GbdtModel, features) -> np.ndarray:
    return model.predict_proba(features)
