import json
from pathlib import Path

import pytest

from pesentry.corpus import CorpusProfile, cache_features, generate_synthetic_corpus, load_manifest

ASSETS = Path(__file__).parent / "assets"

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def load_fixture(name: str) -> tuple[bytes, dict]:
    return (ASSETS / f"{name}.exe").read_bytes(), json.loads((ASSETS / f"{name}.json").read_text())


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """30 files per class, seed 7: cheap enough for unit-level training tests."""
    root = tmp_path_factory.mktemp("small_corpus")
    manifest = generate_synthetic_corpus(CorpusProfile.uniform(30), 7, root)
    entries = load_manifest(manifest).entries
    cache, failures = cache_features(entries, "vector", root / "features.pesf")
    assert not failures
    return manifest, entries, cache


@pytest.fixture(scope="session")
def seed42_corpus(tmp_path_factory):
    """The seed-42, 200-per-class corpus the experiment-shape criteria run on."""
    root = tmp_path_factory.mktemp("seed42")
    manifest = generate_synthetic_corpus(CorpusProfile.uniform(200), 42, root)
    entries = load_manifest(manifest).entries
    cache, failures = cache_features(entries, "vector", root / "features.pesf")
    assert not failures
    return manifest, entries, cache


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
