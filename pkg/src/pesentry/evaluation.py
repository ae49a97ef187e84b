"""Metrics, confusion matrices, experiment runs and report rendering."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import POSITIVE_CLASS, DatasetSpec, FeatureCache, LabeledSet, ManifestEntry, build_dataset
from .errors import LengthMismatch, UnknownPositiveClass
from .gbdt import TrainLog
from .models import ModelConfig, train_model
from .pipeline import BenchmarkModel, BiLayeredModel, Bundle, SingleModel, save_bundle, train_benchmark, train_bilayer


@dataclass
class ConfusionMatrix:
    classes: list[str]
    counts: np.ndarray  # rows = true class, columns = predicted class

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> ConfusionMatrix:
        return cls(list(doc["classes"]), np.array(doc["counts"], dtype=np.int64).reshape(len(doc["classes"]), -1))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\predicted", *self.classes])
        for c, row in zip(self.classes, self.counts):
            w.writerow([c, *row.tolist()])
        return buf.getvalue()


@dataclass
class EvalReport:
    accuracy: float
    f1_macro: float
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    confusion: ConfusionMatrix
    positive_class: str | None = None
    fnr: float | None = None
    undetected: int | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1_macro": self.f1_macro,
            "precision": dict(self.precision),
            "recall": dict(self.recall),
            "f1": dict(self.f1),
            "confusion": self.confusion.to_dict(),
            "positive_class": self.positive_class,
            "fnr": self.fnr,
            "undetected": self.undetected,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> EvalReport:
        return cls(
            accuracy=doc["accuracy"],
            f1_macro=doc["f1_macro"],
            precision=dict(doc["precision"]),
            recall=dict(doc["recall"]),
            f1=dict(doc["f1"]),
            confusion=ConfusionMatrix.from_dict(doc["confusion"]),
            positive_class=doc.get("positive_class"),
            fnr=doc.get("fnr"),
            undetected=doc.get("undetected"),
            metadata=dict(doc.get("metadata", {})),
        )


def confusion_matrix(true_labels, predicted_labels, classes: Sequence) -> ConfusionMatrix:
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        counts[index[t], index[p]] += 1
    return ConfusionMatrix([str(c) for c in classes], counts)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(
    true_labels,
    predicted_labels,
    positive_class=None,
    classes: Sequence | None = None,
    metadata: dict | None = None,
) -> EvalReport:
    true_labels, predicted_labels = list(true_labels), list(predicted_labels)
    if len(true_labels) != len(predicted_labels):
        raise LengthMismatch(f"{len(true_labels)} true labels vs {len(predicted_labels)} predictions")
    if not true_labels:
        raise LengthMismatch("need at least one label")
    if classes is None:
        classes = sorted(set(true_labels) | set(predicted_labels), key=str)
    classes = list(classes)
    extra = (set(true_labels) | set(predicted_labels)) - set(classes)
    if extra:
        raise ValueError(f"labels outside the class list: {sorted(map(str, extra))}")
    if positive_class is not None and positive_class not in classes:
        raise UnknownPositiveClass(f"{positive_class!r} is not one of {classes}")

    cm = confusion_matrix(true_labels, predicted_labels, classes)
    counts = cm.counts
    tp = np.diag(counts)
    precision, recall, f1 = {}, {}, {}
    for i, c in enumerate(cm.classes):
        p = _ratio(int(tp[i]), int(counts[:, i].sum()))
        r = _ratio(int(tp[i]), int(counts[i].sum()))
        precision[c], recall[c] = p, r
        f1[c] = 2 * p * r / (p + r) if p + r > 0 else 0.0
    report = EvalReport(
        accuracy=int(tp.sum()) / cm.total,
        f1_macro=float(np.mean(list(f1.values()))),
        precision=precision,
        recall=recall,
        f1=f1,
        confusion=cm,
        metadata=dict(metadata or {}),
    )
    if positive_class is not None:
        k = classes.index(positive_class)
        pos = cm.classes[k]
        report.positive_class = pos
        report.undetected = int(counts[k].sum() - tp[k])
        # defined as FN/(FN+TP); written via recall so fnr + recall == 1 holds exactly
        report.fnr = 1.0 - recall[pos] if counts[k].sum() else None  # undefined without positives
    return report


# --- rendering ---------------------------------------------------------------------


def _matrix_block(cm: ConfusionMatrix) -> list[str]:
    width = max(8, *(len(c) for c in cm.classes))
    lines = ["confusion (rows = true, columns = predicted)"]
    lines.append(" " * width + "".join(f" {c:>{width}}" for c in cm.classes))
    for c, row in zip(cm.classes, cm.counts):
        lines.append(f"{c:<{width}}" + "".join(f" {v:>{width}d}" for v in row))
    return lines


def render_report(report: EvalReport) -> tuple[str, dict]:
    """Plain-text table plus the JSON-ready document for one report."""
    meta = report.metadata
    lines = []
    if meta:
        lines.append("  ".join(f"{k}={meta[k]}" for k in sorted(meta) if not isinstance(meta[k], (dict, list))))
    lines.append(f"accuracy  {report.accuracy:.4f}")
    lines.append(f"f1_macro  {report.f1_macro:.4f}")
    if report.positive_class is not None:
        fnr = "n/a" if report.fnr is None else f"{report.fnr:.4f}"
        lines.append(f"fnr       {fnr}  ({report.undetected} undetected {report.positive_class})")
        lines.append(f"f1[{report.positive_class}]  {report.f1[report.positive_class]:.4f}")
    lines.append("")
    lines.append(f"{'class':<16}{'precision':>10}{'recall':>10}{'f1':>10}")
    for c in report.confusion.classes:
        lines.append(f"{c:<16}{report.precision[c]:>10.4f}{report.recall[c]:>10.4f}{report.f1[c]:>10.4f}")
    lines.append("")
    lines.extend(_matrix_block(report.confusion))
    return "\n".join(lines) + "\n", report.to_dict()


def render_comparison(reports: dict[str, EvalReport]) -> str:
    """Side-by-side accuracy / macro-F1 table, one column per named report."""
    names = list(reports)
    classes = reports[names[0]].confusion.classes
    rows = [("accuracy", [reports[n].accuracy for n in names]),
            ("f1_macro", [reports[n].f1_macro for n in names])]
    rows += [(f"f1[{c}]", [reports[n].f1.get(c, 0.0) for n in names]) for c in classes]
    lw = max(len(r[0]) for r in rows)
    w = max(10, *(len(n) for n in names))
    lines = [f"{'metric':<{lw}}" + "".join(f" {n:>{w}}" for n in names)]
    lines += [f"{label:<{lw}}" + "".join(f" {v:>{w}.4f}" for v in vals) for label, vals in rows]
    return "\n".join(lines) + "\n"


# --- experiments -------------------------------------------------------------------


def evaluate_predictor(predictor, data: LabeledSet, positive_class=None, metadata=None) -> EvalReport:
    if isinstance(predictor, (BiLayeredModel, BenchmarkModel)):
        predicted = [v.label for v in predictor.predict(data.X)]
    else:
        model = predictor.model if isinstance(predictor, SingleModel) else predictor
        idx = np.argmax(model.predict_proba(data.X), axis=1)
        predicted = [model.label_schema[i] for i in idx]
    return compute_metrics(data.labels, predicted, positive_class, data.classes, metadata)


@dataclass
class RunResult:
    reports: dict[str, EvalReport]
    bundles: dict[str, Bundle]
    logs: dict[str, TrainLog | None]
    split_digests: dict[str, list[str]]


def train_for_task(spec: DatasetSpec, config: ModelConfig, train: LabeledSet, val: LabeledSet):
    """Fit whatever the task calls for; returns ({name: Bundle}, {name: TrainLog})."""
    meta = {"task": spec.task, "family": config.family, "seed": config.seed,
            "dataset": spec.to_dict(), "dataset_digest": spec.digest()}
    if spec.task == "bilayer_eval":
        bl, bl_logs = train_bilayer(train.X, train.labels, config, validation=(val.X, val.labels))
        bm, bm_log = train_benchmark(train.X, train.labels, config, validation=(val.X, val.labels))
        bundles = {"bilayer": Bundle(bl, {**meta, "topology": "bilayer"}),
                   "benchmark": Bundle(bm, {**meta, "topology": "benchmark"})}
        logs = {"bilayer.stage1": bl_logs["stage1"], "bilayer.stage2": bl_logs["stage2"], "benchmark": bm_log}
        return bundles, logs
    model, log = train_model(config, train.X, train.y, list(train.classes), (val.X, val.y))
    return {"model": Bundle(SingleModel(model), {**meta, "topology": "single"})}, {"model": log}


def run_experiment(
    spec: DatasetSpec,
    config: ModelConfig,
    entries: list[ManifestEntry],
    cache: FeatureCache,
    run_dir: str | Path | None = None,
) -> RunResult:
    """Build the split, train on train (validation is logged), report on test only."""
    train, val, test = build_dataset(entries, spec, cache)
    bundles, logs = train_for_task(spec, config, train, val)
    positive = POSITIVE_CLASS.get(spec.task)
    reports = {}
    for name, bundle in bundles.items():
        meta = {k: bundle.meta[k] for k in ("task", "family", "seed", "dataset_digest", "topology")}
        meta["cache_digest"] = cache.digest()
        reports[name] = evaluate_predictor(bundle.predictor, test, positive, meta)
    result = RunResult(reports, bundles, logs, {
        "train": train.digests, "val": val.digests, "test": test.digests,
    })
    if run_dir is not None:
        write_run(result, spec, config, Path(run_dir))
    return result


def write_run(result: RunResult, spec: DatasetSpec, config: ModelConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    spec_doc = {
        "dataset": spec.to_dict(),
        "dataset_digest": spec.digest(),
        "model": {"family": config.family, "seed": config.seed, "gbdt": config.gbdt, "mlp": config.mlp},
        "splits": result.split_digests,
    }
    (run_dir / "spec.json").write_text(json.dumps(spec_doc, sort_keys=True, indent=2) + "\n")
    for name, bundle in result.bundles.items():
        save_bundle(bundle, run_dir / name)
    logs = {k: (v.to_dict() if v is not None else None) for k, v in result.logs.items()}
    (run_dir / "train_log.json").write_text(json.dumps(logs, sort_keys=True) + "\n")
    write_reports(result.reports, run_dir)


def write_reports(reports: dict[str, EvalReport], run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    docs, texts, csvs = {}, [], []
    for name, report in reports.items():
        text, doc = render_report(report)
        docs[name] = doc
        texts.append(f"== {name} ==\n{text}")
        csvs.append(f"# {name}\n{report.confusion.to_csv()}")
    if len(reports) > 1:
        texts.append("== comparison ==\n" + render_comparison(reports))
    (run_dir / "report.json").write_text(json.dumps({"reports": docs}, sort_keys=True, indent=2) + "\n")
    (run_dir / "report.txt").write_text("\n".join(texts))
    (run_dir / "confusion.csv").write_text("".join(csvs))
