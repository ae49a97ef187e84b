"""Bi-layered (malware gate, then ransomware) and flat benchmark topologies.

Both produce a three-way ``Verdict`` so their confusion matrices share a
label space.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BundleError, DegenerateLabels, SchemaMismatch
from .features import FeatureVector
from .gbdt import TrainLog
from .models import ModelConfig, TrainedModel, model_from_dict, save_model, train_model

BENIGN, MALWARE_OTHER, RANSOMWARE = "benign", "malware_other", "ransomware"
LABELS = (BENIGN, MALWARE_OTHER, RANSOMWARE)
STAGE1_SCHEMA = [BENIGN, "malicious"]
STAGE2_SCHEMA = [MALWARE_OTHER, RANSOMWARE]

BUNDLE_FORMAT = "pesentry-bundle"
BUNDLE_VERSION = 1


@dataclass(frozen=True)
class Verdict:
    label: str
    malware_score: float
    ransomware_score: float = 0.0

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown verdict label {self.label!r}")


class CountingModel:
    """Wraps a model and counts the rows it is asked to score."""

    def __init__(self, model: TrainedModel):
        self.model = model
        self.calls = 0
        self.rows = 0

    @property
    def input_width(self) -> int:
        return self.model.input_width

    @property
    def label_schema(self) -> list[str]:
        return self.model.label_schema

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X)
        self.calls += 1
        self.rows += X.shape[0]
        return self.model.predict_proba(X)


def _as_matrix(x, width: int) -> np.ndarray:
    if isinstance(x, FeatureVector):
        x = x.values
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != width:
        raise SchemaMismatch(f"model expects width {width}, got shape {X.shape}")
    return X


@dataclass
class BiLayeredModel:
    stage1: TrainedModel
    stage2: TrainedModel
    threshold1: float = 0.5
    threshold2: float = 0.5

    def __post_init__(self):
        if self.stage1.input_width != self.stage2.input_width:
            raise SchemaMismatch(
                f"stage widths differ: {self.stage1.input_width} vs {self.stage2.input_width}"
            )

    @property
    def input_width(self) -> int:
        return self.stage1.input_width

    def predict(self, X) -> list[Verdict]:
        X = _as_matrix(X, self.input_width)
        p1 = self.stage1.predict_proba(X)[:, 1]
        gate = p1 >= self.threshold1
        p2 = np.zeros(X.shape[0])
        if gate.any():
            # stage 2 only ever sees rows that passed the gate
            p2[gate] = self.stage2.predict_proba(X[gate])[:, 1]
        out = []
        for a, passed, b in zip(p1, gate, p2):
            if not passed:
                out.append(Verdict(BENIGN, float(a), 0.0))
            else:
                out.append(Verdict(RANSOMWARE if b >= self.threshold2 else MALWARE_OTHER, float(a), float(b)))
        return out


@dataclass
class BenchmarkModel:
    model: TrainedModel

    def __post_init__(self):
        if list(self.model.label_schema) != list(LABELS):
            raise SchemaMismatch(f"benchmark schema must be {list(LABELS)}, got {self.model.label_schema}")

    @property
    def input_width(self) -> int:
        return self.model.input_width

    def predict(self, X) -> list[Verdict]:
        P = self.model.predict_proba(_as_matrix(X, self.input_width))
        out = []
        for row in P:
            k = int(np.argmax(row))  # first maximum wins, i.e. schema order on ties
            malware = float(row[1] + row[2])
            rscore = float(row[2] / malware) if k != 0 and malware > 0 else 0.0
            out.append(Verdict(LABELS[k], malware, rscore))
        return out


def bilayer_predict(m: BiLayeredModel, fv) -> Verdict:
    return m.predict(fv)[0]


def benchmark_predict(m: BenchmarkModel, fv) -> Verdict:
    return m.predict(fv)[0]


def _encode_labels(labels, schema: list[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(schema)}
    return np.array([index[l] for l in labels], dtype=np.int64)


def _require(labels, classes, what: str):
    missing = [c for c in classes if c not in set(labels)]
    if missing:
        raise DegenerateLabels(f"{what}: no training examples for {missing}")


def stage_views(labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stage-1 targets over all rows, plus the malicious-row mask and their stage-2 targets."""
    labels = np.asarray(labels)
    malicious = labels != BENIGN
    y1 = malicious.astype(np.int64)
    y2 = (labels[malicious] == RANSOMWARE).astype(np.int64)
    return y1, malicious, y2


def train_bilayer(
    X,
    labels,
    config: ModelConfig = ModelConfig(),
    validation: tuple | None = None,
    stage1: TrainedModel | None = None,
    stage2: TrainedModel | None = None,
    threshold1: float = 0.5,
    threshold2: float = 0.5,
) -> tuple[BiLayeredModel, dict[str, TrainLog | None]]:
    """Train each stage on its own label view; a pre-trained stage is used as-is."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    unknown = set(labels.tolist()) - set(LABELS)
    if unknown:
        raise ValueError(f"labels outside {LABELS}: {sorted(unknown)}")
    y1, mal, y2 = stage_views(labels)
    val1 = val2 = None
    if validation is not None:
        Xv, lv = np.asarray(validation[0], dtype=np.float64), np.asarray(validation[1])
        v1, vmal, v2 = stage_views(lv)
        val1 = (Xv, v1)
        val2 = (Xv[vmal], v2) if vmal.any() else None
    logs: dict[str, TrainLog | None] = {"stage1": None, "stage2": None}
    if stage1 is None:
        _require(labels.tolist(), [BENIGN], "stage 1")
        stage1, logs["stage1"] = train_model(config, X, y1, STAGE1_SCHEMA, val1)
    if stage2 is None:
        _require(labels.tolist(), [MALWARE_OTHER, RANSOMWARE], "stage 2")
        stage2, logs["stage2"] = train_model(config, X[mal], y2, STAGE2_SCHEMA, val2)
    return BiLayeredModel(stage1, stage2, threshold1, threshold2), logs


def train_benchmark(
    X,
    labels,
    config: ModelConfig = ModelConfig(),
    validation: tuple | None = None,
) -> tuple[BenchmarkModel, TrainLog]:
    labels = np.asarray(labels)
    _require(labels.tolist(), LABELS, "benchmark")
    y = _encode_labels(labels, list(LABELS))
    val = None
    if validation is not None:
        val = (validation[0], _encode_labels(validation[1], list(LABELS)))
    model, log = train_model(config, np.asarray(X, dtype=np.float64), y, list(LABELS), val)
    return BenchmarkModel(model), log


@dataclass
class SingleModel:
    """A plain classifier wrapped so it can live in a bundle next to the pipelines."""

    model: TrainedModel

    @property
    def input_width(self) -> int:
        return self.model.input_width

    def predict_proba(self, X) -> np.ndarray:
        return self.model.predict_proba(_as_matrix(X, self.input_width))


Predictor = BiLayeredModel | BenchmarkModel | SingleModel


@dataclass
class Bundle:
    predictor: Predictor
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return {BiLayeredModel: "bilayer", BenchmarkModel: "benchmark", SingleModel: "single"}[type(self.predictor)]

    def models(self) -> dict[str, TrainedModel]:
        p = self.predictor
        if isinstance(p, BiLayeredModel):
            return {"stage1": p.stage1, "stage2": p.stage2}
        return {"model": p.model}


def _write_manifest(bundle: Bundle, out_dir: Path, files: dict[str, dict]) -> Path:
    doc = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "kind": bundle.kind,
        "feature_width": bundle.predictor.input_width,
        "models": files,
        "meta": bundle.meta,
    }
    if isinstance(bundle.predictor, BiLayeredModel):
        doc["threshold1"] = bundle.predictor.threshold1
        doc["threshold2"] = bundle.predictor.threshold2
    path = out_dir / "bundle.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def save_bundle(bundle: Bundle, out_dir: str | Path) -> Path:
    """One JSON file per model plus ``bundle.json`` referencing them by relative path and sha256."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, model in bundle.models().items():
        rel = f"{name}.json"
        files[name] = {"path": rel, "sha256": save_model(model, out_dir / rel)}
    return _write_manifest(bundle, out_dir, files)


def load_bundle(path: str | Path) -> Bundle:
    path = Path(path)
    if path.is_dir():
        path = path / "bundle.json"
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != BUNDLE_FORMAT or doc.get("version") != BUNDLE_VERSION:
        raise BundleError(f"{path} is not a pesentry bundle")
    models = {}
    for name, ref in doc["models"].items():
        f = path.parent / ref["path"]
        data = f.read_bytes()
        if hashlib.sha256(data).hexdigest() != ref["sha256"]:
            raise BundleError(f"digest mismatch for {f}")
        models[name] = model_from_dict(json.loads(data))
    kind = doc["kind"]
    if kind == "bilayer":
        pred = BiLayeredModel(models["stage1"], models["stage2"], doc["threshold1"], doc["threshold2"])
    elif kind == "benchmark":
        pred = BenchmarkModel(models["model"])
    elif kind == "single":
        pred = SingleModel(models["model"])
    else:
        raise BundleError(f"unknown bundle kind {kind!r}")
    if pred.input_width != doc["feature_width"]:
        raise BundleError("bundle feature_width disagrees with its models")
    return Bundle(pred, doc.get("meta", {}))


def replace_stage(bundle_path: str | Path, stage: str, model: TrainedModel) -> Path:
    """Swap one stage of a saved bi-layered bundle; the other stage's file is not touched."""
    bundle_path = Path(bundle_path)
    if bundle_path.is_dir():
        bundle_path = bundle_path / "bundle.json"
    bundle = load_bundle(bundle_path)
    if not isinstance(bundle.predictor, BiLayeredModel) or stage not in ("stage1", "stage2"):
        raise BundleError("replace_stage needs a bi-layered bundle and stage1 or stage2")
    setattr(bundle.predictor, stage, model)
    bundle.predictor.__post_init__()
    out_dir = bundle_path.parent
    doc = json.loads(bundle_path.read_text(encoding="utf-8"))
    files = dict(doc["models"])
    files[stage] = {"path": f"{stage}.json", "sha256": save_model(model, out_dir / f"{stage}.json")}
    return _write_manifest(bundle, out_dir, files)

