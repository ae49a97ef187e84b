"""pesentry command line: generate, extract, train, predict, evaluate.

stdout carries data only (verdict lines, tables); diagnostics go to stderr.
Exit codes: 0 success, 1 fatal error, 2 partial failure during extraction.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .corpus import (
    MODES,
    POSITIVE_CLASS,
    CorpusProfile,
    DatasetSpec,
    FeatureCache,
    build_dataset,
    cache_features,
    extract_row,
    generate_synthetic_corpus,
    load_manifest,
    to_cache_precision,
)
from .errors import PesentryError, SchemaMismatch
from .evaluation import evaluate_predictor, render_comparison, render_report, train_for_task, write_reports
from .models import FAMILIES, ModelConfig
from .pe import ParseDegraded, parse_pe
from .pipeline import BenchmarkModel, BiLayeredModel, SingleModel, load_bundle, save_bundle

log = logging.getLogger("pesentry")

TASKS = {
    "malware": "malware_detection",
    "families": "family_classification",
    "ransomware": "ransomware_detection",
    "bilayer": "bilayer_eval",
    "benchmark": "bilayer_eval",
}
EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def _error_line(code: str, message: str, **extra) -> None:
    print(json.dumps({"error": code, "message": message, **extra}), file=sys.stderr)


def _mode_for_width(width: int) -> str:
    for mode, w in MODES.items():
        if w == width:
            return mode
    raise SchemaMismatch(f"no extractor produces width {width}")


# --- subcommands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    profile = CorpusProfile.uniform(args.per_class)
    manifest = generate_synthetic_corpus(profile, args.seed, args.out)
    log.info("wrote %s", manifest)
    return EXIT_OK


def cmd_extract(args) -> int:
    ingest = load_manifest(args.manifest)
    cache, failures = cache_features(ingest.entries, args.mode, args.out, threads=args.threads)
    skipped = [{"path": p, "reason": "missing"} for p in ingest.missing]
    skipped += [{"path": f.path, "reason": f.reason} for f in failures]
    for s in skipped:
        _error_line("Skipped", f"skipped {s['path']}", **s)
    log.info("cached %d rows of width %d to %s", cache.matrix.shape[0], cache.width, args.out)
    return EXIT_PARTIAL if skipped else EXIT_OK


def _model_config(args) -> ModelConfig:
    gbdt, mlp = {}, {}
    if args.rounds is not None:
        gbdt["num_rounds"] = args.rounds
    if args.epochs is not None:
        mlp["epochs"] = args.epochs
    return ModelConfig(args.model, seed=args.seed, gbdt=gbdt, mlp=mlp)


def cmd_train(args) -> int:
    entries = load_manifest(args.manifest).entries
    cache = FeatureCache.read(args.cache)
    caps = None if args.cap is None else {c: args.cap for c in DatasetSpec(TASKS[args.task]).classes}
    spec = DatasetSpec(TASKS[args.task], caps=caps, seed=args.seed)
    config = _model_config(args)
    train, val, _ = build_dataset(entries, spec, cache)
    bundles, logs = train_for_task(spec, config, train, val)
    if args.task in ("bilayer", "benchmark"):
        bundles = {args.task: bundles[args.task]}
        logs = {k: v for k, v in logs.items() if k.startswith(args.task)}
    (name, bundle), = bundles.items()
    bundle.meta.update({"feature_mode": _mode_for_width(cache.width), "cache_digest": cache.digest(),
                        "topology": args.task if args.task in ("bilayer", "benchmark") else "single"})
    out = Path(args.out)
    save_bundle(bundle, out)
    (out / "train_log.json").write_text(
        json.dumps({k: (v.to_dict() if v else None) for k, v in logs.items()}, sort_keys=True) + "\n")
    spec_doc = {"dataset": spec.to_dict(), "dataset_digest": spec.digest(),
                "model": {"family": config.family, "seed": config.seed, "gbdt": config.gbdt, "mlp": config.mlp},
                "splits": {"train": train.digests, "val": val.digests}}
    (out / "spec.json").write_text(json.dumps(spec_doc, sort_keys=True, indent=2) + "\n")
    log.info("trained %s/%s bundle in %s", args.task, config.family, out)
    return EXIT_OK


def _predict_inputs(path: Path) -> list[tuple[str, Path]]:
    if path.suffix == ".jsonl":
        ingest = load_manifest(path, verify=False)
        items = [(e.path, e.file) for e in ingest.entries]
        items += [(p, path.parent / p) for p in ingest.missing]
        return items
    return [(str(path), path)]


def _verdict_line(bundle, mode: str, shown: str, file: Path) -> dict:
    line: dict = {"path": shown}
    try:
        data = file.read_bytes()
        row = extract_row(data, mode)
    except (OSError, ValueError) as exc:
        line["error"] = type(exc).__name__
        return line
    if mode == "vector":
        parsed = parse_pe(data) if data else ParseDegraded("empty")
        if isinstance(parsed, ParseDegraded):
            line["degraded"] = parsed.reason
    X = to_cache_precision(row)[None, :]
    pred = bundle.predictor
    if isinstance(pred, (BiLayeredModel, BenchmarkModel)):
        v = pred.predict(X)[0]
        line.update(label=v.label, malware_score=v.malware_score, ransomware_score=v.ransomware_score)
    else:
        p = pred.predict_proba(X)[0]
        schema = pred.model.label_schema
        line.update(label=schema[int(p.argmax())], scores={c: float(x) for c, x in zip(schema, p)})
    return line


def cmd_predict(args) -> int:
    bundle = load_bundle(args.bundle)
    mode = bundle.meta.get("feature_mode") or _mode_for_width(bundle.predictor.input_width)
    items = _predict_inputs(Path(args.input))

    def work(item):
        return _verdict_line(bundle, mode, *item)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            lines = list(pool.map(work, items))
    else:
        lines = [work(i) for i in items]
    for line in lines:
        print(json.dumps(line))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundles = [load_bundle(b) for b in args.bundle]
    specs = {json.dumps(b.meta.get("dataset"), sort_keys=True) for b in bundles}
    if len(specs) != 1 or None in (b.meta.get("dataset") for b in bundles):
        raise SchemaMismatch("bundles must carry the same dataset spec to share a test split")
    spec = DatasetSpec.from_dict(bundles[0].meta["dataset"])
    cache = FeatureCache.read(args.cache)
    for b in bundles:
        if b.predictor.input_width != cache.width:
            raise SchemaMismatch(f"bundle expects width {b.predictor.input_width}, cache has {cache.width}")
    entries = load_manifest(args.manifest).entries
    _, _, test = build_dataset(entries, spec, cache)
    reports = {}
    for path, b in zip(args.bundle, bundles):
        name = b.meta.get("topology") or Path(path).stem
        while name in reports:
            name += "'"
        meta = {"task": spec.task, "family": b.meta.get("family"), "seed": b.meta.get("seed"),
                "dataset_digest": spec.digest(), "cache_digest": cache.digest(), "topology": name}
        predictor = b.predictor
        positive = POSITIVE_CLASS.get(spec.task) if isinstance(predictor, SingleModel) else None
        reports[name] = evaluate_predictor(predictor, test, positive, meta)
    write_reports(reports, Path(args.out))
    if len(reports) > 1:
        sys.stdout.write(render_comparison(reports))
    else:
        sys.stdout.write(render_report(next(iter(reports.values())))[0])
    return EXIT_OK


# --- entry point -----------------------------------------------------------------


def _default_seed() -> int:
    return int(os.environ.get("PESENTRY_SEED", "42"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (env PESENTRY_SEED, default 42)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for extraction/prediction")
    common.add_argument("--quiet", action="store_true", help="only report errors on stderr")

    parser = argparse.ArgumentParser(prog="pesentry", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic PE corpus with manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=200)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("extract", parents=[common], help="extract features into a cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=sorted(MODES), default="vector")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="train a model bundle")
    p.add_argument("--task", choices=list(TASKS), required=True)
    p.add_argument("--model", choices=FAMILIES, default="xgb-like")
    p.add_argument("--cache", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=int, default=None, help="per-class cap on selected files")
    p.add_argument("--rounds", type=int, default=None, help="override GBDT boosting rounds")
    p.add_argument("--epochs", type=int, default=None, help="override MLP epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="print one JSON verdict per input file")
    p.add_argument("--bundle", required=True)
    p.add_argument("--input", required=True, help="a PE file or a .jsonl manifest")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score bundles on the held-out test split")
    p.add_argument("--bundle", action="append", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None:
        args.seed = _default_seed()
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.ERROR if args.quiet else logging.INFO)
    try:
        return args.func(args)
    except (PesentryError, ValueError, OSError, KeyError) as exc:
        code = exc.code if isinstance(exc, PesentryError) else type(exc).__name__
        _error_line(code, str(exc))
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
