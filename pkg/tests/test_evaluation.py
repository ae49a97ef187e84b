import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pesentry.corpus import DatasetSpec
from pesentry.errors import LengthMismatch, UnknownPositiveClass
from pesentry.evaluation import EvalReport, compute_metrics, render_comparison, render_report, run_experiment
from pesentry.models import ModelConfig


def test_fnr_reference_count():
    n_pos, missed = 57293, 55
    true = ["malicious"] * n_pos + ["benign"] * 100
    pred = ["benign"] * missed + ["malicious"] * (n_pos - missed) + ["benign"] * 100
    r = compute_metrics(true, pred, positive_class="malicious")
    assert r.undetected == 55
    assert r.fnr == pytest.approx(55 / 57293, rel=1e-12)
    assert round(100 * r.fnr, 2) == 0.10


def test_hand_computed_binary_case():
    r = compute_metrics([1, 1, 1, 0, 0], [1, 0, 1, 0, 1], positive_class=1, classes=[0, 1])
    assert r.accuracy == pytest.approx(3 / 5)
    assert r.precision["1"] == pytest.approx(2 / 3) and r.recall["1"] == pytest.approx(2 / 3)
    assert r.f1["0"] == pytest.approx(1 / 2)
    assert r.f1_macro == pytest.approx(7 / 12)
    assert r.fnr == pytest.approx(1 / 3)
    assert r.confusion.counts.tolist() == [[1, 1], [1, 2]]


def test_perfect_predictions():
    labels = ["a", "b", "c", "b"]
    r = compute_metrics(labels, labels, positive_class="c")
    assert r.accuracy == 1.0 and r.f1_macro == 1.0 and r.fnr == 0.0 and r.undetected == 0


def test_fnr_undefined_without_positives():
    r = compute_metrics(["a", "a"], ["a", "b"], positive_class="b", classes=["a", "b"])
    assert r.fnr is None
    assert "n/a" in render_report(r)[0]


def test_errors():
    with pytest.raises(LengthMismatch):
        compute_metrics(["a"], ["a", "b"])
    with pytest.raises(LengthMismatch):
        compute_metrics([], [])
    with pytest.raises(UnknownPositiveClass):
        compute_metrics(["a"], ["a"], positive_class="z")


labels3 = st.lists(st.tuples(st.sampled_from("xyz"), st.sampled_from("xyz")), min_size=1, max_size=200)


@settings(max_examples=100, deadline=None)
@given(labels3)
def test_confusion_marginals(pairs):
    true, pred = zip(*pairs)
    r = compute_metrics(list(true), list(pred), classes=list("xyz"))
    cm = r.confusion.counts
    assert cm.sum() == len(pairs)
    for i, c in enumerate("xyz"):
        assert cm[i].sum() == true.count(c)
        assert cm[:, i].sum() == pred.count(c)
    assert r.accuracy == pytest.approx(np.trace(cm) / len(pairs))


@settings(max_examples=100, deadline=None)
@given(labels3)
def test_fnr_plus_recall_is_one(pairs):
    true, pred = zip(*pairs)
    r = compute_metrics(list(true), list(pred), positive_class="x", classes=list("xyz"))
    if "x" in true:
        assert r.fnr + r.recall["x"] == 1.0
        assert r.undetected == sum(t == "x" and p != "x" for t, p in pairs)
    else:
        assert r.fnr is None


def test_render_contains_matrix_and_round_trips():
    true = ["benign", "malware_other", "ransomware"] * 3
    pred = ["benign", "ransomware", "ransomware", "benign", "malware_other", "ransomware",
            "malware_other", "malware_other", "benign"]
    r = compute_metrics(true, pred, positive_class="ransomware", metadata={"family": "mlp"})
    text, doc = render_report(r)
    assert "fnr" in text and "family=mlp" in text
    block = text[text.index("confusion"):].splitlines()
    assert len(block) == 5
    rows = [[int(v) for v in line.split()[1:]] for line in block[2:]]
    assert rows == r.confusion.counts.tolist()
    assert sum(map(sum, rows)) == 9
    back = EvalReport.from_dict(json.loads(json.dumps(doc)))
    assert back.to_dict() == doc
    table = render_comparison({"bilayer": r, "benchmark": back})
    assert "bilayer" in table.splitlines()[0] and len({len(line) for line in table.splitlines()}) == 1


@pytest.mark.parametrize("task", ["malware_detection", "ransomware_detection"])
def test_run_experiment(small_corpus, tmp_path, task):
    _, entries, cache = small_corpus
    spec = DatasetSpec(task, seed=42)
    cfg = ModelConfig("xgb-like", seed=0, gbdt={"num_rounds": 10})
    a = run_experiment(spec, cfg, entries, cache, tmp_path / "a")
    b = run_experiment(spec, cfg, entries, cache, tmp_path / "b")
    rep = a.reports["model"]
    splits = a.split_digests
    assert not set(splits["test"]) & (set(splits["train"]) | set(splits["val"]))
    assert rep.confusion.total == len(splits["test"])
    assert rep.fnr is not None and rep.metadata["cache_digest"] == cache.digest()
    assert rep.to_dict() == b.reports["model"].to_dict()
    for name in ("report.json", "report.txt", "confusion.csv", "spec.json", "train_log.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    written = json.loads((tmp_path / "a" / "spec.json").read_text())
    assert written["splits"]["test"] == splits["test"]


def test_bilayer_experiment_shares_label_space(small_corpus):
    _, entries, cache = small_corpus
    res = run_experiment(DatasetSpec("bilayer_eval"), ModelConfig("xgb-like", gbdt={"num_rounds": 10}), entries, cache)
    assert set(res.reports) == {"bilayer", "benchmark"}
    a, b = res.reports["bilayer"].confusion, res.reports["benchmark"].confusion
    assert a.classes == b.classes == ["benign", "malware_other", "ransomware"]
    assert a.total == b.total == len(res.split_digests["test"])
