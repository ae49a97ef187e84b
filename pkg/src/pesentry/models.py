"""Model-family dispatch and on-disk model files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .gbdt import GbdtModel, TrainLog, gbdt_train, preset
from .mlp import MlpConfig, MlpModel, mlp_train

TrainedModel = Union[GbdtModel, MlpModel]

FAMILIES = ("xgb-like", "lgbm-like", "mlp")
_ALIASES = {
    "gbdt_xgb_like": "xgb-like",
    "xgboost-like": "xgb-like",
    "gbdt_lgbm_like": "lgbm-like",
    "lightgbm-like": "lgbm-like",
}


def canonical_family(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in FAMILIES:
        raise ValueError(f"unknown model family {name!r}; choose from {FAMILIES}")
    return name


@dataclass(frozen=True)
class ModelConfig:
    """What to train: a family plus overrides for that family's config."""

    family: str = "xgb-like"
    seed: int = 0
    gbdt: dict = field(default_factory=dict)
    mlp: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "family", canonical_family(self.family))


def train_model(
    config: ModelConfig,
    X: np.ndarray,
    y: np.ndarray,
    label_schema: list[str],
    validation: tuple | None = None,
) -> tuple[TrainedModel, TrainLog]:
    k = len(label_schema)
    if config.family == "mlp":
        cfg = MlpConfig(**{"seed": config.seed, **config.mlp})
        return mlp_train(X, y, cfg, validation=validation, label_schema=label_schema, num_classes=k)
    cfg = preset(config.family, num_classes=k, seed=config.seed, **config.gbdt)
    return gbdt_train(X, y, cfg, validation=validation, label_schema=label_schema)


def model_from_dict(doc: dict) -> TrainedModel:
    fmt = doc.get("format")
    if fmt == "pesentry-gbdt":
        return GbdtModel.from_dict(doc)
    if fmt == "pesentry-mlp":
        return MlpModel.from_dict(doc)
    raise ValueError(f"unknown model format {fmt!r}")


def save_model(model: TrainedModel, path: str | Path) -> str:
    """Write the model as JSON and return the file's sha256."""
    data = model.dumps().encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_model(path: str | Path) -> TrainedModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
