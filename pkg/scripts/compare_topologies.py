"""Bi-layered cascade vs flat benchmark on one synthetic test split, with confusion matrices.

    python scripts/compare_topologies.py --family xgb-like --per-class 200
"""

import argparse
from pathlib import Path

from pesentry.corpus import DatasetSpec
from pesentry.evaluation import render_comparison, render_report, run_experiment
from pesentry.models import FAMILIES, ModelConfig
from run_synthetic_experiments import prepare


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/synthetic"))
    ap.add_argument("--per-class", type=int, default=200)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--family", choices=FAMILIES, default="xgb-like")
    args = ap.parse_args()

    entries, cache = prepare(args.out, args.per_class, args.seed)
    res = run_experiment(DatasetSpec("bilayer_eval", seed=args.seed), ModelConfig(args.family, seed=args.seed),
                         entries, cache, args.out / "topologies" / args.family)
    for name, rep in res.reports.items():
        print(f"== {name} ==")
        print(render_report(rep)[0])
    print(render_comparison(res.reports), end="")


if __name__ == "__main__":
    main()
