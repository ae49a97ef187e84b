import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pesentry.errors import DegenerateLabels, ShapeMismatch
from pesentry.gbdt import (
    GbdtConfig,
    GbdtModel,
    NoSplit,
    find_best_split,
    gbdt_predict_proba,
    gbdt_train,
    preset,
)


def blobs(n=200, seed=0, k=2):
    rng = np.random.default_rng(seed)
    centers = np.array([[-4.0, -4.0], [4.0, 4.0], [4.0, -4.0], [-4.0, 4.0]])[:k]
    y = np.arange(n) % k
    X = centers[y] + rng.normal(scale=0.7, size=(n, 2))
    return X, y


def brute_force_root(X, y, min_samples_leaf, lam):
    """Exhaustive first-round split: every feature, every midpoint, gain from direct sums."""
    g = 0.5 - (1.0 - y)  # p = 0.5 at base score 0, so g = p - y
    h = np.full(len(y), 0.25)
    G, H = g.sum(), h.sum()
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f].tolist()))
        for a, b in zip(vals, vals[1:]):
            t = (a + b) / 2.0
            if not t > a:
                t = b
            left = X[:, f] < t
            nl = int(left.sum())
            if nl < min_samples_leaf or len(y) - nl < min_samples_leaf:
                continue
            gl, hl = g[left].sum(), h[left].sum()
            gr, hr = g[~left].sum(), h[~left].sum()
            gain = gl ** 2 / (hl + lam) + gr ** 2 / (hr + lam) - G ** 2 / (H + lam)
            if best is None or gain > best[0]:
                best = (gain, f, t)
    return best if best is not None and best[0] > 0 else None


def root_split(X, y, msl, lam):
    cfg = GbdtConfig(num_rounds=1, max_depth=1, min_samples_leaf=msl, lambda_l2=lam)
    model, _ = gbdt_train(X, y, cfg)
    if not model.trees:  # every feature constant: no round is grown
        return None
    tree = model.trees[0][0]
    if tree.feature[0] < 0:
        return None
    return int(tree.feature[0]), float(tree.threshold[0])


def test_two_point_stump():
    cfg = GbdtConfig(num_rounds=1, max_depth=1, min_samples_leaf=1)
    model, _ = gbdt_train(np.array([[0.0], [1.0]]), np.array([0, 1]), cfg)
    tree = model.trees[0][0]
    assert tree.feature[0] == 0 and tree.threshold[0] == 0.5
    leaf = 0.1 * 0.5 / (0.25 + 1.0)
    assert tree.value[tree.left[0]] == pytest.approx(-leaf, abs=1e-15)
    assert tree.value[tree.right[0]] == pytest.approx(leaf, abs=1e-15)
    p = gbdt_predict_proba(model, np.array([[0.0], [1.0]]))[:, 1]
    assert p[0] < 0.5 < p[1]


def test_find_best_split_examples():
    cfg = GbdtConfig(min_samples_leaf=1, lambda_l2=0.0)
    assert isinstance(find_best_split(np.ones(4), np.ones(4), np.full(4, 3.0), cfg), NoSplit)
    t, gain = find_best_split(np.array([-1.0, -1, 1, 1]), np.ones(4), np.array([1.0, 2, 3, 4]), cfg)
    assert t == 2.5 and gain == pytest.approx(4.0)
    # 1.5 and 3.5 have equal gain; the smaller threshold wins
    t, _ = find_best_split(np.array([1.0, -1, -1, 1]), np.ones(4), np.array([1.0, 2, 3, 4]), cfg)
    assert t == 1.5


def test_find_best_split_respects_min_samples_leaf():
    cfg = GbdtConfig(min_samples_leaf=3, lambda_l2=0.0)
    assert isinstance(find_best_split(np.array([-1.0, 1, 1, -1]), np.ones(4), np.arange(4.0), cfg), NoSplit)


def test_degenerate_and_shape_errors():
    X = np.zeros((4, 2))
    with pytest.raises(DegenerateLabels):
        gbdt_train(X, np.zeros(4, dtype=int))
    with pytest.raises(ShapeMismatch):
        gbdt_train(X, np.array([0, 1, 0]))
    with pytest.raises(ShapeMismatch):
        gbdt_train(np.zeros(4), np.array([0, 1, 0, 1]))
    model, _ = gbdt_train(np.array([[0.0], [1.0]]), [0, 1], GbdtConfig(num_rounds=1, min_samples_leaf=1))
    with pytest.raises(ShapeMismatch):
        model.predict_proba(np.zeros((2, 3)))


@pytest.mark.parametrize("kwargs", [
    {"num_rounds": -1}, {"learning_rate": -0.1}, {"max_depth": 0}, {"min_samples_leaf": 0},
    {"lambda_l2": -1}, {"feature_subsample": 0.0}, {"feature_subsample": 1.5}, {"num_classes": 1}, {"seed": -1},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        GbdtConfig(**kwargs)


def test_zero_round_models_are_uniform():
    X, y = blobs(10)
    m, log = gbdt_train(X, y, GbdtConfig(num_rounds=0))
    assert np.allclose(m.predict_proba(X), 0.5) and log.train_loss == []
    X3, y3 = blobs(12, k=3)
    m3, _ = gbdt_train(X3, y3, GbdtConfig(num_rounds=0, num_classes=3))
    assert np.allclose(m3.predict_proba(X3), 1 / 3)


def test_separable_blobs_fit_within_50_rounds():
    X, y = blobs(200)
    model, log = gbdt_train(X, y, GbdtConfig(num_rounds=50))
    assert (model.predict_proba(X).argmax(1) == y).mean() == 1.0
    assert len(log.train_loss) == 50
    assert np.all(np.diff(log.train_loss) <= 1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.integers(1, 4), st.integers(1, 6), st.sampled_from([0.0, 1.0]),
       st.integers(0, 2**32 - 1), st.booleans())
def test_first_round_split_matches_brute_force(n, d, msl, lam, seed, discrete):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 5, size=(n, d)).astype(float) if discrete else rng.normal(size=(n, d))
    y = rng.integers(0, 2, size=n)
    y[0], y[-1] = 0, 1
    oracle = brute_force_root(X, y, msl, lam)
    got = root_split(X, y, msl, lam)
    if oracle is None:
        assert got is None
    else:
        assert got == (oracle[1], oracle[2])


def test_multiclass_blobs_and_tree_invariants():
    X, y = blobs(240, k=3, seed=3)
    cfg = GbdtConfig(num_rounds=20, num_classes=3, max_depth=3)
    model, log = gbdt_train(X, y, cfg)
    assert all(len(r) == 3 for r in model.trees)
    assert (model.predict_proba(X).argmax(1) == y).mean() == 1.0
    assert np.all(np.diff(log.train_loss) <= 1e-12)
    for round_trees in model.trees:
        for t in round_trees:
            assert t.depth <= cfg.max_depth
            assert t.feature.max() < model.input_width


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_probabilities_normalized(seed, k):
    X, y = blobs(60, seed=seed % 1000, k=k)
    X = X + np.random.default_rng(seed).normal(scale=3.0, size=X.shape)
    model, _ = gbdt_train(X, y, GbdtConfig(num_rounds=5, num_classes=k, min_samples_leaf=3))
    P = model.predict_proba(np.random.default_rng(seed).normal(scale=6, size=(30, 2)))
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((P > 0) & (P < 1))


def test_determinism_and_round_trip():
    X, y = blobs(120, seed=5)
    X = np.column_stack([X, np.random.default_rng(1).normal(size=(120, 3))])
    cfg = preset("lgbm-like", num_rounds=15, seed=9)
    a, _ = gbdt_train(X, y, cfg)
    b, _ = gbdt_train(X, y, cfg)
    assert a.dumps() == b.dumps()
    back = GbdtModel.from_dict(json.loads(a.dumps()))
    assert back.dumps() == a.dumps()
    assert np.array_equal(back.predict_proba(X), a.predict_proba(X))


def test_monotone_transform_keeps_predicted_labels():
    X, y = blobs(200, seed=11)
    X = X + np.random.default_rng(2).normal(scale=2.5, size=X.shape)  # overlapping classes
    cfg = GbdtConfig(num_rounds=30, min_samples_leaf=5)
    a, _ = gbdt_train(X, y, cfg)
    b, _ = gbdt_train(X ** 3, y, cfg)
    assert np.array_equal(a.predict_proba(X).argmax(1), b.predict_proba(X ** 3).argmax(1))


def test_validation_log_and_early_stopping():
    X, y = blobs(200, seed=4)
    X = X + np.random.default_rng(0).normal(scale=4.0, size=X.shape)
    Xv, yv = X[150:], y[150:]
    cfg = GbdtConfig(num_rounds=200, early_stopping_rounds=3, min_samples_leaf=2, max_depth=6)
    model, log = gbdt_train(X[:150], y[:150], cfg, validation=(Xv, yv))
    assert len(log.train_loss) == len(log.val_loss) == len(model.trees) < 200


def test_presets():
    assert preset("xgb-like") == GbdtConfig()
    p = preset("lgbm-like")
    assert (p.max_depth, p.min_samples_leaf, p.feature_subsample) == (8, 20, 0.8)
