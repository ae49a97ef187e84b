import math
import struct

import numpy as np
import pefile
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pesentry.errors import EmptyInput
from pesentry.pe import MAX_SECTIONS, ParseDegraded, ParsedPe, RawBinary, parse_pe, section_entropy
from pesentry.synthetic import PeBuilder

from conftest import ASSETS, load_fixture

FIXTURES = sorted(p.stem for p in ASSETS.glob("*.exe"))


@pytest.mark.parametrize("name", FIXTURES)
def test_fixture_matches_sidecar(name):
    data, side = load_fixture(name)
    pe = parse_pe(RawBinary(data))
    assert isinstance(pe, ParsedPe)
    assert pe.coff.number_of_sections == side["number_of_sections"] == len(pe.sections)
    assert pe.coff.machine == side["machine"]
    assert pe.coff.timestamp == side["timestamp"]
    assert pe.optional.magic == side["magic"]
    assert pe.optional.size_of_image == side["size_of_image"]
    assert pe.optional.size_of_headers == side["size_of_headers"]
    assert (pe.optional.major_linker_version, pe.optional.minor_linker_version) == tuple(side["linker_version"])
    for got, want in zip(pe.sections, side["sections"]):
        assert got.name == want["name"]
        assert got.raw_size == want["raw_size"]
        assert got.virtual_size == want["virtual_size"]
        assert got.characteristics == want["characteristics"]
        assert got.entropy == pytest.approx(want["entropy"], abs=1e-12)
    assert [[i.library, i.symbol] for i in pe.imports] == side["imports"]
    assert list(pe.import_libraries) == side["import_libraries"]
    assert list(pe.exports) == side["exports"]
    assert len(pe.data_directories) == 16
    assert [[d.virtual_address, d.size] for d in pe.data_directories] == side["data_directories"]
    assert pe.overlay_size == side["overlay_size"]
    assert (pe.entry_section.name if pe.entry_section else None) == side["entry_section"]


@pytest.mark.parametrize("name", FIXTURES)
def test_fixture_agrees_with_pefile(name):
    data, _ = load_fixture(name)
    ours = parse_pe(data)
    ref = pefile.PE(data=data)
    assert [s.name for s in ours.sections] == [s.Name.rstrip(b"\0").decode() for s in ref.sections]
    for a, b in zip(ours.sections, ref.sections):
        assert a.entropy == pytest.approx(b.get_entropy(), abs=1e-9)
        assert a.virtual_size == b.Misc_VirtualSize
    ref_imports = [
        (d.dll.decode().lower(), imp.name.decode() if imp.name else f"ordinal{imp.ordinal}")
        for d in getattr(ref, "DIRECTORY_ENTRY_IMPORT", [])
        for imp in d.imports
    ]
    assert [(i.library, i.symbol) for i in ours.imports] == ref_imports
    ref_exports = [e.name.decode() for e in getattr(getattr(ref, "DIRECTORY_ENTRY_EXPORT", None), "symbols", [])]
    assert list(ours.exports) == ref_exports
    assert ours.optional.subsystem == ref.OPTIONAL_HEADER.Subsystem
    assert ours.optional.dll_characteristics == ref.OPTIONAL_HEADER.DllCharacteristics


def test_minimal_fixture_shape():
    data, _ = load_fixture("minimal")
    pe = parse_pe(data)
    assert pe.coff.number_of_sections == 1
    assert pe.imports == []
    assert pe.exports == []


def test_mz_then_zeros_is_truncated_pe_header():
    res = parse_pe(b"MZ" + bytes(100))
    assert isinstance(res, ParseDegraded)
    assert res.reason == "truncated_pe_header"


@pytest.mark.parametrize("data,reason", [
    (b"", "empty"),
    (b"ZM" + bytes(200), "not_mz"),
    (b"MZ" + bytes(10), "truncated_dos_header"),
])
def test_degrade_reasons(data, reason):
    assert parse_pe(data).reason == reason


def test_bad_signature_and_truncations():
    data, _ = load_fixture("minimal")
    lfanew = struct.unpack_from("<I", data, 0x3C)[0]
    bad = bytearray(data)
    bad[lfanew:lfanew + 4] = b"NE\0\0"
    assert parse_pe(bytes(bad)).reason == "bad_pe_signature"
    assert parse_pe(data[: lfanew + 24 + 10]).reason == "truncated_optional_header"
    bad = bytearray(data)
    struct.pack_into("<H", bad, lfanew + 24, 0x999)
    assert parse_pe(bytes(bad)).reason == "bad_optional_magic"
    # header claims more sections than the file holds
    bad = bytearray(data[: lfanew + 24 + 224 + 20])
    assert parse_pe(bytes(bad)).reason == "truncated_section_table"


def test_section_cap_degrades_but_keeps_first_96():
    b = PeBuilder()
    for i in range(MAX_SECTIONS + 4):
        b.add_section(f".s{i}", bytes([i % 256]) * 16, 0x40000040)
    res = parse_pe(b.build())
    assert isinstance(res, ParseDegraded)
    assert res.reason == "too_many_sections"
    assert len(res.sections) == MAX_SECTIONS
    assert res.sections[0].name == ".s0"


def test_raw_binary_contract(tmp_path):
    with pytest.raises(EmptyInput):
        RawBinary(b"")
    with pytest.raises(ValueError):
        RawBinary(b"abc", sha256="0" * 64)
    p = tmp_path / "f.bin"
    p.write_bytes(b"hello")
    rb = RawBinary.from_path(p)
    assert rb.sha256 == "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"


def test_section_entropy_examples():
    assert section_entropy(b"\x41" * 4096) == 0.0
    assert section_entropy(bytes(range(256))) == 8.0
    assert section_entropy(bytes([0, 0, 1, 1])) == 1.0
    assert section_entropy(b"") == 0.0


@given(st.binary(max_size=2048))
def test_section_entropy_bounds_and_permutation(data):
    h = section_entropy(data)
    assert 0.0 <= h <= 8.0
    assert section_entropy(data[::-1]) == pytest.approx(h, abs=1e-12)
    if data:
        counts = np.bincount(np.frombuffer(data, np.uint8))
        p = counts[counts > 0] / len(data)
        assert h == pytest.approx(max(0.0, -sum(x * math.log2(x) for x in p)), abs=1e-12)


def _mutations():
    seeds = [load_fixture(n)[0] for n in ("minimal", "imports3", "exports200", "imports64")]
    return st.sampled_from(seeds).flatmap(
        lambda base: st.lists(
            st.tuples(st.integers(0, len(base) - 1), st.integers(0, 255)), max_size=24
        ).flatmap(lambda flips: st.integers(0, len(base)).map(lambda cut: (base, flips, cut)))
    )


@settings(max_examples=300, deadline=None)
@given(_mutations())
def test_parse_is_total_on_mutated_fixtures(case):
    base, flips, cut = case
    data = bytearray(base)
    for i, v in flips:
        data[i] = v
    data = bytes(data[:cut])
    res = parse_pe(data)
    assert isinstance(res, (ParsedPe, ParseDegraded))
    again = parse_pe(data)
    assert again == res
    if isinstance(res, ParsedPe):
        assert len(res.data_directories) == 16
        assert len(res.sections) == res.coff.number_of_sections
        assert all(0.0 <= s.entropy <= 8.0 for s in res.sections)
        assert all(imp.library for imp in res.imports)


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=4096))
def test_parse_is_total_on_random_bytes(data):
    assert isinstance(parse_pe(data), (ParsedPe, ParseDegraded))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text("abcdefgh.", min_size=1, max_size=8), min_size=1, max_size=6, unique=True),
       st.booleans())
def test_builder_sections_round_trip(names, pe32_plus):
    b = PeBuilder(pe32_plus=pe32_plus)
    for i, n in enumerate(names):
        b.add_section(n, bytes([i]) * (100 + i), 0x60000020 if i == 0 else 0x40000040)
    pe = parse_pe(b.build())
    assert isinstance(pe, ParsedPe)
    assert [s.name for s in pe.sections] == names
    assert pe.optional.is_pe32_plus == pe32_plus
