"""Static PE features, boosted trees and dense nets for malware and ransomware detection."""

from .corpus import (
    DatasetSpec,
    FeatureCache,
    ManifestEntry,
    build_dataset,
    cache_features,
    generate_synthetic_corpus,
    ingest_manifest,
)
from .evaluation import ConfusionMatrix, EvalReport, compute_metrics, render_report, run_experiment
from .features import FEATURE_WIDTH, FeatureVector, extract_feature_vector
from .gbdt import GbdtConfig, GbdtModel, find_best_split, gbdt_predict_proba, gbdt_train
from .grayscale import GrayscaleImage, extract_grayscale
from .mlp import MlpConfig, MlpModel, mlp_loss_and_gradients, mlp_predict_proba, mlp_train
from .models import ModelConfig
from .pe import ParseDegraded, ParsedPe, RawBinary, parse_pe
from .pipeline import (
    BenchmarkModel,
    BiLayeredModel,
    Verdict,
    benchmark_predict,
    bilayer_predict,
    train_benchmark,
    train_bilayer,
)

__version__ = "0.1.0"
