"""Train every model family on every task over a synthetic corpus and print test accuracy.

    python scripts/run_synthetic_experiments.py --out runs/synthetic --per-class 200 --seed 42
"""

import argparse
import logging
import time
from pathlib import Path

from pesentry.corpus import CorpusProfile, DatasetSpec, FeatureCache, cache_features, generate_synthetic_corpus, load_manifest
from pesentry.evaluation import render_comparison, run_experiment
from pesentry.models import FAMILIES, ModelConfig

TASKS = ("malware_detection", "family_classification", "ransomware_detection", "bilayer_eval")

log = logging.getLogger("experiments")


def prepare(out: Path, per_class: int, seed: int):
    manifest = out / "corpus" / "manifest.jsonl"
    if not manifest.exists():
        generate_synthetic_corpus(CorpusProfile.uniform(per_class), seed, out / "corpus")
    entries = load_manifest(manifest).entries
    cache_path = out / "features.pesf"
    if cache_path.exists():
        cache = FeatureCache.read(cache_path)
    else:
        cache, failures = cache_features(entries, "vector", cache_path)
        for f in failures:
            log.warning("skipped %s: %s", f.path, f.reason)
    return entries, cache


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/synthetic"))
    ap.add_argument("--per-class", type=int, default=200)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--tasks", nargs="+", default=list(TASKS), choices=TASKS)
    ap.add_argument("--families", nargs="+", default=list(FAMILIES), choices=FAMILIES)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    entries, cache = prepare(args.out, args.per_class, args.seed)
    for task in args.tasks:
        spec = DatasetSpec(task, seed=args.seed)
        reports = {}
        for family in args.families:
            t0 = time.perf_counter()
            res = run_experiment(spec, ModelConfig(family, seed=args.seed), entries, cache,
                                 args.out / task / family)
            for name, rep in res.reports.items():
                label = family if name == "model" else f"{family}/{name}"
                reports[label] = rep
            log.info("%s %s done in %.1fs", task, family, time.perf_counter() - t0)
        print(f"\n== {task} ==")
        print(render_comparison(reports), end="")


if __name__ == "__main__":
    main()
