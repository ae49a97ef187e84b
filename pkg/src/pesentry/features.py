"""2,381-dimensional static feature vector.

Group order and widths follow ``FEATURE_LAYOUT``. Token hashing uses
64-bit FNV-1a over UTF-8 bytes with ``bucket = hash % width`` so vectors are
reproducible across implementations.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .pe import (
    SCN_MEM_EXECUTE,
    SCN_MEM_READ,
    SCN_MEM_WRITE,
    ParseDegraded,
    ParsedPe,
    RawBinary,
    parse_pe,
)

SCHEMA_VERSION = 1

FEATURE_LAYOUT: tuple[tuple[str, int, int], ...] = (
    ("byte_histogram", 0, 256),
    ("byte_entropy", 256, 256),
    ("strings", 512, 104),
    ("general", 616, 10),
    ("header", 626, 62),
    ("section", 688, 255),
    ("imports", 943, 1280),
    ("exports", 2223, 128),
    ("data_directories", 2351, 30),
)
FEATURE_WIDTH = 2381

ENTROPY_WINDOW = 2048
ENTROPY_STEP = 1024
MIN_PARTIAL_WINDOW = 256

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(token: str | bytes) -> int:
    data = token.encode("utf-8") if isinstance(token, str) else token
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def hash_bucket(token: str, width: int) -> int:
    return fnv1a_64(token) % width


def hashed_counts(tokens: Iterable[str], width: int) -> np.ndarray:
    out = np.zeros(width)
    for t in tokens:
        out[hash_bucket(t, width)] += 1.0
    return out


def hashed_values(pairs: Iterable[tuple[str, float]], width: int) -> np.ndarray:
    out = np.zeros(width)
    for t, v in pairs:
        out[hash_bucket(t, width)] += v
    return out


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.values.shape != (FEATURE_WIDTH,):
            raise ValueError(f"feature vector must have {FEATURE_WIDTH} entries, got {self.values.shape}")

    def group(self, name: str) -> np.ndarray:
        return self.values[group_slice(name)]


def group_slice(name: str) -> slice:
    for group, offset, width in FEATURE_LAYOUT:
        if group == name:
            return slice(offset, offset + width)
    raise KeyError(name)


def _as_array(raw: RawBinary | bytes) -> np.ndarray:
    data = raw.bytes if isinstance(raw, RawBinary) else raw
    return np.frombuffer(data, dtype=np.uint8)


def _normalized(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    if total == 0:
        return np.zeros(counts.shape)
    return counts / total


def extract_byte_histogram(raw: RawBinary | bytes) -> np.ndarray:
    return _normalized(np.bincount(_as_array(raw), minlength=256).astype(np.float64))


def _window_spans(n: int) -> list[tuple[int, int]]:
    if n == 0:
        return []
    if n < MIN_PARTIAL_WINDOW:
        return [(0, n)]
    spans = [(s, s + ENTROPY_WINDOW) for s in range(0, n - ENTROPY_WINDOW + 1, ENTROPY_STEP)]
    covered = spans[-1][1] if spans else 0
    if covered < n:
        start = spans[-1][0] + ENTROPY_STEP if spans else 0
        if n - start >= MIN_PARTIAL_WINDOW:
            spans.append((start, n))
    return spans


def _entropy_rows(counts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    p = counts / lengths[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(counts > 0, -p * np.log2(p), 0.0)
    return np.clip(terms.sum(axis=1), 0.0, 8.0)


def extract_byte_entropy_histogram(raw: RawBinary | bytes) -> np.ndarray:
    """Joint (window entropy bin, high nibble) histogram, flattened row-major."""
    a = _as_array(raw)
    spans = _window_spans(a.size)
    if not spans:
        return np.zeros(256)
    counts = np.zeros((len(spans), 256), dtype=np.int64)
    n_full = sum(1 for s, e in spans if e - s == ENTROPY_WINDOW)
    if n_full:
        # a full window at k*step is exactly step-blocks k and k+1
        n_blocks = n_full + 1
        body = a[: n_blocks * ENTROPY_STEP].astype(np.int64)
        keys = np.repeat(np.arange(n_blocks) * 256, ENTROPY_STEP) + body
        blocks = np.bincount(keys, minlength=n_blocks * 256).reshape(n_blocks, 256)
        counts[:n_full] = blocks[:-1] + blocks[1:]
    for i, (s, e) in enumerate(spans[n_full:], start=n_full):
        counts[i] = np.bincount(a[s:e], minlength=256)
    lengths = np.array([e - s for s, e in spans], dtype=np.float64)
    h = _entropy_rows(counts.astype(np.float64), lengths)
    hbin = np.minimum((h * 2).astype(np.int64), 15)
    nibble_counts = counts.reshape(len(spans), 16, 16).sum(axis=2)
    joint = np.zeros((16, 16))
    for row, nib in zip(hbin, nibble_counts):
        joint[row] += nib
    return _normalized(joint.ravel())


_PRINTABLE_RUN = re.compile(rb"[\x20-\x7e]{5,}")
_URL = re.compile(rb"https?://", re.IGNORECASE)


def _char_entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(max(0.0, -np.sum(p * np.log2(p))))


def extract_string_features(raw: RawBinary | bytes) -> np.ndarray:
    """Statistics over printable ASCII runs of length >= 5.

    Layout: count, mean length, 96-bin character histogram (byte - 0x20),
    character entropy, runs starting with ``C:\\``, runs containing a URL,
    runs containing ``HKEY_``, runs starting with ``MZ``, total characters.
    """
    data = raw.bytes if isinstance(raw, RawBinary) else raw
    runs = _PRINTABLE_RUN.findall(data)
    out = np.zeros(104)
    if not runs:
        return out
    joined = np.frombuffer(b"".join(runs), dtype=np.uint8)
    char_counts = np.bincount(joined - 0x20, minlength=96).astype(np.float64)
    total_chars = float(joined.size)
    out[0] = len(runs)
    out[1] = total_chars / len(runs)
    out[2:98] = char_counts / total_chars
    out[98] = _char_entropy(char_counts)
    out[99] = sum(1 for r in runs if r[:3].lower() == b"c:\\")
    out[100] = sum(1 for r in runs if _URL.search(r))
    out[101] = sum(1 for r in runs if b"HKEY_" in r)
    out[102] = sum(1 for r in runs if r.startswith(b"MZ"))
    out[103] = total_chars
    return out


def extract_general_info(pe: ParsedPe | ParseDegraded, raw: RawBinary | bytes) -> np.ndarray:
    data = raw.bytes if isinstance(raw, RawBinary) else raw
    out = np.zeros(10)
    out[0] = len(data)
    if isinstance(pe, ParseDegraded):
        return out
    out[1] = pe.optional.size_of_image
    out[2] = pe.has_directory("DEBUG")
    out[3] = len(pe.exports)
    out[4] = len(pe.imports)
    out[5] = pe.has_directory("BASE_RELOCATION_TABLE")
    out[6] = pe.has_directory("RESOURCE_TABLE")
    out[7] = pe.has_directory("CERTIFICATE_TABLE")
    out[8] = pe.has_directory("TLS_TABLE")
    out[9] = pe.coff.number_of_symbols
    return out


def extract_header_info(pe: ParsedPe | ParseDegraded) -> np.ndarray:
    """Timestamp, hashed COFF/optional-header tokens, magic one-hot, versions and sizes.

    Slots 54..61 carry extra optional-header sizes so the block fills 62.
    """
    out = np.zeros(62)
    if isinstance(pe, ParseDegraded):
        return out
    coff, opt = pe.coff, pe.optional
    out[0] = coff.timestamp
    out[1:11] = hashed_counts([coff.machine_name], 10)
    out[11:21] = hashed_counts(coff.characteristic_names, 10)
    out[21:31] = hashed_counts([opt.subsystem_name], 10)
    out[31:41] = hashed_counts(opt.dll_characteristic_names, 10)
    out[41:43] = (0.0, 1.0) if opt.is_pe32_plus else (1.0, 0.0)
    out[43:51] = (
        opt.major_image_version, opt.minor_image_version,
        opt.major_linker_version, opt.minor_linker_version,
        opt.major_os_version, opt.minor_os_version,
        opt.major_subsystem_version, opt.minor_subsystem_version,
    )
    out[51:54] = (opt.size_of_code, opt.size_of_headers, opt.size_of_heap_commit)
    out[54:62] = (
        opt.size_of_initialized_data, opt.size_of_uninitialized_data,
        opt.address_of_entry_point, opt.base_of_code,
        opt.size_of_stack_reserve, opt.size_of_stack_commit,
        opt.size_of_heap_reserve, opt.number_of_rva_and_sizes,
    )
    return out


def extract_section_features(pe: ParsedPe | ParseDegraded) -> np.ndarray:
    out = np.zeros(255)
    if isinstance(pe, ParseDegraded):
        return out
    secs = pe.sections
    out[0] = len(secs)
    out[1] = sum(1 for s in secs if s.raw_size == 0)
    out[2] = sum(1 for s in secs if s.name == "")
    rx = SCN_MEM_READ | SCN_MEM_EXECUTE
    out[3] = sum(1 for s in secs if s.characteristics & rx == rx)
    out[4] = sum(1 for s in secs if s.characteristics & SCN_MEM_WRITE)
    out[5:55] = hashed_values([(s.name, s.raw_size) for s in secs], 50)
    out[55:105] = hashed_values([(s.name, s.entropy) for s in secs], 50)
    out[105:155] = hashed_values([(s.name, s.virtual_size) for s in secs], 50)
    entry = pe.entry_section
    if entry is not None:
        out[155:205] = hashed_counts([entry.name], 50)
        out[205:255] = hashed_counts(entry.characteristic_names, 50)
    return out


def extract_import_features(pe: ParsedPe | ParseDegraded) -> np.ndarray:
    out = np.zeros(1280)
    if isinstance(pe, ParseDegraded):
        return out
    out[:256] = hashed_counts(pe.import_libraries, 256)
    out[256:] = hashed_counts((f"{e.library}:{e.symbol}" for e in pe.imports), 1024)
    return out


def extract_export_features(pe: ParsedPe | ParseDegraded) -> np.ndarray:
    if isinstance(pe, ParseDegraded):
        return np.zeros(128)
    return hashed_counts(pe.exports, 128)


def extract_data_directories(pe: ParsedPe | ParseDegraded) -> np.ndarray:
    out = np.zeros(30)
    if isinstance(pe, ParseDegraded):
        return out
    for i, d in enumerate(pe.data_directories[:15]):
        out[2 * i] = d.virtual_address
        out[2 * i + 1] = d.size
    return out


def extract_feature_vector(raw: RawBinary | bytes) -> FeatureVector:
    data = raw.bytes if isinstance(raw, RawBinary) else bytes(raw)
    pe = parse_pe(data) if data else ParseDegraded("empty")
    values = np.concatenate([
        extract_byte_histogram(data),
        extract_byte_entropy_histogram(data),
        extract_string_features(data),
        extract_general_info(pe, data),
        extract_header_info(pe),
        extract_section_features(pe),
        extract_import_features(pe),
        extract_export_features(pe),
        extract_data_directories(pe),
    ])
    return FeatureVector(values)
