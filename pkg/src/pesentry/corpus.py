"""Manifests, feature caches and per-task dataset assembly."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import CacheError, InsufficientClass, SchemaError
from .features import FEATURE_WIDTH, extract_feature_vector
from .grayscale import IMAGE_SIDE, extract_grayscale
from .synthetic import CLASSES, FAMILIES, CorpusProfile, generate_synthetic_corpus  # noqa: F401

log = logging.getLogger(__name__)

LABELS = ("benign", "malicious")
MODES = {"vector": FEATURE_WIDTH, "grayscale": IMAGE_SIDE * IMAGE_SIDE}

TASK_CLASSES = {
    "malware_detection": ("benign", "malicious"),
    "family_classification": FAMILIES,
    "ransomware_detection": ("malware_other", "ransomware"),
    "bilayer_eval": ("benign", "malware_other", "ransomware"),
}
POSITIVE_CLASS = {"malware_detection": "malicious", "ransomware_detection": "ransomware"}


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    family: str | None
    source: str
    sha256: str
    base_dir: str = field(default="", compare=False)

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.family is not None and self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family is not None and self.label != "malicious":
            raise ValueError("a family is only allowed on malicious entries")
        if len(self.sha256) != 64 or any(c not in "0123456789abcdef" for c in self.sha256):
            raise ValueError("sha256 must be 64 lowercase hex characters")

    @property
    def file(self) -> Path:
        return Path(self.base_dir) / self.path

    def to_json(self) -> dict:
        return {"path": self.path, "label": self.label, "family": self.family,
                "source": self.source, "sha256": self.sha256}


@dataclass
class IngestResult:
    entries: list[ManifestEntry]
    duplicates: int = 0
    missing: list[str] = field(default_factory=list)


def load_manifest(path: str | Path, verify: bool = True) -> IngestResult:
    """Parse and validate a JSONL manifest; paths resolve against its directory.

    Files that are listed but absent are skipped and reported; with ``verify``
    each present file's sha256 is checked against its entry.
    """
    path = Path(path)
    base = str(path.parent)
    result = IngestResult([])
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(doc, dict):
                raise SchemaError("expected a JSON object", lineno)
            missing_keys = {"path", "label", "sha256"} - doc.keys()
            if missing_keys:
                raise SchemaError(f"missing fields {sorted(missing_keys)}", lineno)
            try:
                entry = ManifestEntry(
                    path=str(doc["path"]),
                    label=doc["label"],
                    family=doc.get("family"),
                    source=str(doc.get("source", "")),
                    sha256=doc["sha256"],
                    base_dir=base,
                )
            except ValueError as exc:
                raise SchemaError(str(exc), lineno) from None
            if entry.sha256 in seen:
                result.duplicates += 1
                continue
            if not entry.file.is_file():
                result.missing.append(entry.path)
                continue
            if verify and hashlib.sha256(entry.file.read_bytes()).hexdigest() != entry.sha256:
                raise SchemaError(f"sha256 does not match content of {entry.path}", lineno)
            seen.add(entry.sha256)
            result.entries.append(entry)
    if result.duplicates:
        log.warning("%s: collapsed %d duplicate sha256 entries", path, result.duplicates)
    if result.missing:
        log.warning("%s: skipped %d missing files", path, len(result.missing))
    return result


def ingest_manifest(path: str | Path) -> list[ManifestEntry]:
    return load_manifest(path).entries


def write_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in entries))


# --- feature cache -------------------------------------------------------------

CACHE_MAGIC = b"PESF"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")


@dataclass
class FeatureCache:
    matrix: np.ndarray  # (rows, width) float32
    digests: list[str]
    version: int = CACHE_VERSION

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.digests):
            raise CacheError("row count must equal the digest count")
        self._index = {d: i for i, d in enumerate(self.digests)}

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def rows_for(self, digests: list[str]) -> np.ndarray:
        try:
            idx = [self._index[d] for d in digests]
        except KeyError as exc:
            raise CacheError(f"sha256 {exc.args[0]} is not in the feature cache") from None
        return self.matrix[idx].astype(np.float64)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(CACHE_MAGIC, self.version, self.width, len(self.digests))
        body = b"".join(bytes.fromhex(d) for d in self.digests)
        return head + body + self.matrix.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> FeatureCache:
        if len(data) < _HEADER.size:
            raise CacheError("truncated cache header")
        magic, version, width, rows = _HEADER.unpack_from(data)
        if magic != CACHE_MAGIC:
            raise CacheError("bad cache magic")
        if version != CACHE_VERSION:
            raise CacheError(f"unsupported cache version {version}")
        off = _HEADER.size
        expected = off + rows * 32 + rows * width * 4
        if len(data) != expected:
            raise CacheError(f"cache is {len(data)} bytes, header implies {expected}")
        digests = [data[off + 32 * i: off + 32 * (i + 1)].hex() for i in range(rows)]
        off += 32 * rows
        matrix = np.frombuffer(data, dtype="<f4", offset=off).reshape(rows, width).astype(np.float32)
        return cls(matrix, digests, version)

    def write(self, path: str | Path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def read(cls, path: str | Path) -> FeatureCache:
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def extract_row(data: bytes, mode: str) -> np.ndarray:
    if mode == "vector":
        return extract_feature_vector(data).values
    if mode == "grayscale":
        return extract_grayscale(data).flatten()
    raise ValueError(f"unknown extraction mode {mode!r}")


def to_cache_precision(x: np.ndarray) -> np.ndarray:
    """Round through float32 so freshly extracted rows match cached ones."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class CacheFailure:
    path: str
    reason: str


def cache_features(
    entries: list[ManifestEntry],
    mode: str,
    out: str | Path | None = None,
    threads: int = 1,
) -> tuple[FeatureCache, list[CacheFailure]]:
    """Extract every entry in manifest order; unreadable files are omitted and reported."""
    if mode not in MODES:
        raise ValueError(f"unknown extraction mode {mode!r}")

    def work(entry: ManifestEntry):
        try:
            data = entry.file.read_bytes()
        except OSError as exc:
            return CacheFailure(entry.path, f"{type(exc).__name__}: {exc.strerror or exc}")
        if hashlib.sha256(data).hexdigest() != entry.sha256:
            return CacheFailure(entry.path, "sha256 mismatch")
        try:
            return extract_row(data, mode)
        except ValueError as exc:
            return CacheFailure(entry.path, f"{type(exc).__name__}: {exc}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, entries))
    else:
        results = [work(e) for e in entries]

    rows, digests, failures = [], [], []
    for entry, res in zip(entries, results):
        if isinstance(res, CacheFailure):
            failures.append(res)
        else:
            rows.append(res)
            digests.append(entry.sha256)
    matrix = np.array(rows, dtype=np.float32).reshape(len(rows), MODES[mode])
    cache = FeatureCache(matrix, digests)
    if out is not None:
        cache.write(out)
    return cache, failures


# --- datasets ----------------------------------------------------------------------


def task_label(entry: ManifestEntry, task: str) -> str | None:
    """Class of ``entry`` under ``task``, or None when the task does not use it."""
    if task == "malware_detection":
        return entry.label
    if entry.label != "malicious":
        return "benign" if task == "bilayer_eval" else None
    if task == "family_classification":
        return entry.family
    if task in ("ransomware_detection", "bilayer_eval"):
        return "ransomware" if entry.family == "ransomware" else "malware_other"
    raise ValueError(f"unknown task {task!r}")


@dataclass(frozen=True)
class DatasetSpec:
    task: str
    caps: dict[str, int] | None = None
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 42

    def __post_init__(self):
        if self.task not in TASK_CLASSES:
            raise ValueError(f"unknown task {self.task!r}")
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        if len(self.split) != 3 or min(self.split) < 0 or sum(Fraction(str(s)) for s in self.split) != 1:
            raise ValueError("split fractions must be three non-negative values summing to 1")
        if self.caps is not None and any(v < 1 for v in self.caps.values()):
            raise ValueError("caps must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def classes(self) -> tuple[str, ...]:
        return TASK_CLASSES[self.task]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> DatasetSpec:
        return cls(doc["task"], doc.get("caps"), tuple(doc["split"]), doc["seed"])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class LabeledSet:
    X: np.ndarray
    y: np.ndarray  # class indices into ``classes``
    digests: list[str]
    classes: tuple[str, ...]

    @property
    def labels(self) -> list[str]:
        return [self.classes[i] for i in self.y]

    def __len__(self) -> int:
        return len(self.digests)


def split_sizes(n: int, fractions) -> list[int]:
    """Largest-remainder rounding of ``n * fraction``; leftover ties go to the earlier split."""
    quotas = [n * Fraction(str(f)) for f in fractions]
    sizes = [int(q) for q in quotas]
    by_remainder = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in by_remainder[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def select_and_split(entries: list[ManifestEntry], spec: DatasetSpec) -> tuple[list, list, list]:
    """Per class: seeded permutation, cap, then stratified split. Returns (entry, class) lists."""
    by_class: dict[str, list[ManifestEntry]] = {c: [] for c in spec.classes}
    seen: set[str] = set()
    for e in entries:
        c = task_label(e, spec.task)
        if c in by_class and e.sha256 not in seen:
            seen.add(e.sha256)
            by_class[c].append(e)
    parts: tuple[list, list, list] = ([], [], [])
    for ci, c in enumerate(spec.classes):
        pool = by_class[c]
        if not pool:
            raise InsufficientClass(c)
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, ci]))
        perm = rng.permutation(len(pool))
        k = min(len(pool), spec.caps.get(c, len(pool))) if spec.caps else len(pool)
        chosen = [pool[i] for i in perm[:k]]
        start = 0
        for part, size in zip(parts, split_sizes(k, spec.split)):
            part.extend((e, ci) for e in chosen[start:start + size])
            start += size
    return parts


def build_dataset(
    entries: list[ManifestEntry], spec: DatasetSpec, cache: FeatureCache
) -> tuple[LabeledSet, LabeledSet, LabeledSet]:
    out = []
    for part in select_and_split(entries, spec):
        digests = [e.sha256 for e, _ in part]
        X = cache.rows_for(digests) if digests else np.zeros((0, cache.width))
        y = np.array([ci for _, ci in part], dtype=np.int64)
        out.append(LabeledSet(X, y, digests, spec.classes))
    return tuple(out)
