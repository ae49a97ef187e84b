"""Lenient PE parsing.

Only the structures needed by the feature extractor are decoded. Anything
that cannot be read yields a :class:`ParseDegraded` instead of an exception,
so every file can still be scored on its raw bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInput

MAX_SECTIONS = 96
MAX_IMPORT_DESCRIPTORS = 4096
MAX_THUNKS = 16384
MAX_EXPORT_NAMES = 65536
MAX_NAME_LEN = 4096

PE32_MAGIC = 0x10B
PE32_PLUS_MAGIC = 0x20B

DATA_DIRECTORY_NAMES = (
    "EXPORT_TABLE",
    "IMPORT_TABLE",
    "RESOURCE_TABLE",
    "EXCEPTION_TABLE",
    "CERTIFICATE_TABLE",
    "BASE_RELOCATION_TABLE",
    "DEBUG",
    "ARCHITECTURE",
    "GLOBAL_PTR",
    "TLS_TABLE",
    "LOAD_CONFIG_TABLE",
    "BOUND_IMPORT",
    "IAT",
    "DELAY_IMPORT_DESCRIPTOR",
    "CLR_RUNTIME_HEADER",
    "RESERVED",
)

MACHINE_NAMES = {
    0x0: "UNKNOWN",
    0x14C: "I386",
    0x162: "R3000",
    0x166: "R4000",
    0x1A2: "SH3",
    0x1A6: "SH4",
    0x1C0: "ARM",
    0x1C2: "THUMB",
    0x1C4: "ARMNT",
    0x200: "IA64",
    0x5064: "RISCV64",
    0x8664: "AMD64",
    0xAA64: "ARM64",
    0xEBC: "EBC",
}

COFF_CHARACTERISTICS = {
    0x0001: "RELOCS_STRIPPED",
    0x0002: "EXECUTABLE_IMAGE",
    0x0004: "LINE_NUMS_STRIPPED",
    0x0008: "LOCAL_SYMS_STRIPPED",
    0x0010: "AGGRESSIVE_WS_TRIM",
    0x0020: "LARGE_ADDRESS_AWARE",
    0x0080: "BYTES_REVERSED_LO",
    0x0100: "CHARA_32BIT_MACHINE",
    0x0200: "DEBUG_STRIPPED",
    0x0400: "REMOVABLE_RUN_FROM_SWAP",
    0x0800: "NET_RUN_FROM_SWAP",
    0x1000: "SYSTEM",
    0x2000: "DLL",
    0x4000: "UP_SYSTEM_ONLY",
    0x8000: "BYTES_REVERSED_HI",
}

DLL_CHARACTERISTICS = {
    0x0020: "HIGH_ENTROPY_VA",
    0x0040: "DYNAMIC_BASE",
    0x0080: "FORCE_INTEGRITY",
    0x0100: "NX_COMPAT",
    0x0200: "NO_ISOLATION",
    0x0400: "NO_SEH",
    0x0800: "NO_BIND",
    0x1000: "APPCONTAINER",
    0x2000: "WDM_DRIVER",
    0x4000: "GUARD_CF",
    0x8000: "TERMINAL_SERVER_AWARE",
}

SUBSYSTEM_NAMES = {
    0: "UNKNOWN",
    1: "NATIVE",
    2: "WINDOWS_GUI",
    3: "WINDOWS_CUI",
    5: "OS2_CUI",
    7: "POSIX_CUI",
    8: "NATIVE_WINDOWS",
    9: "WINDOWS_CE_GUI",
    10: "EFI_APPLICATION",
    11: "EFI_BOOT_SERVICE_DRIVER",
    12: "EFI_RUNTIME_DRIVER",
    13: "EFI_ROM",
    14: "XBOX",
    16: "WINDOWS_BOOT_APPLICATION",
}

SECTION_CHARACTERISTICS = {
    0x00000008: "TYPE_NO_PAD",
    0x00000020: "CNT_CODE",
    0x00000040: "CNT_INITIALIZED_DATA",
    0x00000080: "CNT_UNINITIALIZED_DATA",
    0x00000200: "LNK_INFO",
    0x00000800: "LNK_REMOVE",
    0x00001000: "LNK_COMDAT",
    0x00008000: "GPREL",
    0x01000000: "LNK_NRELOC_OVFL",
    0x02000000: "MEM_DISCARDABLE",
    0x04000000: "MEM_NOT_CACHED",
    0x08000000: "MEM_NOT_PAGED",
    0x10000000: "MEM_SHARED",
    0x20000000: "MEM_EXECUTE",
    0x40000000: "MEM_READ",
    0x80000000: "MEM_WRITE",
}

SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000


def flag_names(value: int, table: dict[int, str]) -> list[str]:
    """Names of the bits set in ``value``, in ascending bit order."""
    return [name for bit, name in sorted(table.items()) if value & bit]


@dataclass(frozen=True)
class RawBinary:
    bytes: bytes
    source_path: str = ""
    sha256: str = ""

    def __post_init__(self):
        if len(self.bytes) == 0:
            raise EmptyInput(f"empty binary: {self.source_path or '<memory>'}")
        digest = hashlib.sha256(self.bytes).hexdigest()
        if not self.sha256:
            object.__setattr__(self, "sha256", digest)
        elif self.sha256 != digest:
            raise ValueError("sha256 does not match content")

    @classmethod
    def from_path(cls, path: str | Path) -> RawBinary:
        path = Path(path)
        return cls(path.read_bytes(), str(path))


@dataclass(frozen=True)
class CoffHeader:
    machine: int
    number_of_sections: int
    timestamp: int
    characteristics: int
    number_of_symbols: int = 0
    size_of_optional_header: int = 0

    @property
    def machine_name(self) -> str:
        return MACHINE_NAMES.get(self.machine, f"0x{self.machine:04x}")

    @property
    def characteristic_names(self) -> list[str]:
        return flag_names(self.characteristics, COFF_CHARACTERISTICS)


@dataclass(frozen=True)
class OptionalHeaderInfo:
    magic: int
    subsystem: int
    dll_characteristics: int
    size_of_code: int
    size_of_headers: int
    size_of_image: int
    major_image_version: int = 0
    minor_image_version: int = 0
    major_linker_version: int = 0
    minor_linker_version: int = 0
    major_os_version: int = 0
    minor_os_version: int = 0
    major_subsystem_version: int = 0
    minor_subsystem_version: int = 0
    size_of_initialized_data: int = 0
    size_of_uninitialized_data: int = 0
    address_of_entry_point: int = 0
    base_of_code: int = 0
    image_base: int = 0
    checksum: int = 0
    size_of_stack_reserve: int = 0
    size_of_stack_commit: int = 0
    size_of_heap_reserve: int = 0
    size_of_heap_commit: int = 0
    number_of_rva_and_sizes: int = 0

    @property
    def is_pe32_plus(self) -> bool:
        return self.magic == PE32_PLUS_MAGIC

    @property
    def subsystem_name(self) -> str:
        return SUBSYSTEM_NAMES.get(self.subsystem, f"SUBSYSTEM_{self.subsystem}")

    @property
    def dll_characteristic_names(self) -> list[str]:
        return flag_names(self.dll_characteristics, DLL_CHARACTERISTICS)


@dataclass(frozen=True)
class SectionInfo:
    name: str
    raw_size: int
    virtual_size: int
    entropy: float
    characteristics: int
    is_entry_section: bool = False
    virtual_address: int = 0
    pointer_to_raw_data: int = 0

    @property
    def characteristic_names(self) -> list[str]:
        return flag_names(self.characteristics, SECTION_CHARACTERISTICS)


@dataclass(frozen=True)
class ImportEntry:
    library: str
    symbol: str


@dataclass(frozen=True)
class DataDirectory:
    name: str
    virtual_address: int
    size: int


def _empty_directories() -> list[DataDirectory]:
    return [DataDirectory(n, 0, 0) for n in DATA_DIRECTORY_NAMES]


@dataclass(frozen=True)
class ParsedPe:
    dos_ok: bool
    coff: CoffHeader
    optional: OptionalHeaderInfo
    sections: list[SectionInfo]
    imports: list[ImportEntry]
    exports: list[str]
    data_directories: list[DataDirectory]
    overlay_size: int
    # one lower-cased name per import descriptor, in table order
    import_libraries: list[str] = field(default_factory=list)

    def directory(self, name: str) -> DataDirectory:
        return self.data_directories[DATA_DIRECTORY_NAMES.index(name)]

    def has_directory(self, name: str) -> bool:
        return self.directory(name).size > 0

    @property
    def entry_section(self) -> SectionInfo | None:
        for s in self.sections:
            if s.is_entry_section:
                return s
        return None


@dataclass(frozen=True)
class ParseDegraded:
    """Whatever could be recovered from a malformed file, plus why parsing stopped."""

    reason: str
    dos_ok: bool = False
    coff: CoffHeader | None = None
    optional: OptionalHeaderInfo | None = None
    sections: list[SectionInfo] = field(default_factory=list)


def section_entropy(data: bytes | np.ndarray) -> float:
    """Shannon entropy in bits of the byte-value distribution of ``data``."""
    arr = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    if arr.size == 0:
        return 0.0
    counts = np.bincount(arr, minlength=256)
    p = counts[counts > 0] / arr.size
    h = float(-np.sum(p * np.log2(p)))
    # -0.0 and tiny rounding overshoot
    return min(max(h, 0.0), 8.0)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.size = len(data)

    def fits(self, offset: int, length: int) -> bool:
        return 0 <= offset and offset + length <= self.size

    def unpack(self, fmt: str, offset: int):
        return struct.unpack_from(fmt, self.data, offset)

    def cstring(self, offset: int, limit: int = MAX_NAME_LEN) -> bytes | None:
        if not 0 <= offset < self.size:
            return None
        end = self.data.find(b"\x00", offset, offset + limit)
        if end < 0:
            end = min(offset + limit, self.size)
        return self.data[offset:end]


class _RvaMap:
    def __init__(self, sections: list[tuple[int, int, int, int]], size_of_headers: int, file_size: int):
        # (virtual_address, virtual_size, pointer_to_raw_data, raw_size)
        self.sections = sections
        self.size_of_headers = size_of_headers
        self.file_size = file_size

    def offset(self, rva: int) -> int | None:
        for va, vsize, ptr, rsize in self.sections:
            span = max(vsize, rsize)
            if va <= rva < va + span:
                delta = rva - va
                if delta >= rsize:
                    return None
                off = ptr + delta
                return off if off < self.file_size else None
        if 0 <= rva < min(self.size_of_headers, self.file_size):
            return rva
        return None


def _decode_name(raw: bytes) -> str:
    return raw.decode("utf-8", errors="replace")


def _parse_imports(rd: _Reader, rvas: _RvaMap, dir_rva: int, is64: bool) -> tuple[list[ImportEntry], list[str]]:
    imports: list[ImportEntry] = []
    libraries: list[str] = []
    if dir_rva == 0:
        return imports, libraries
    off = rvas.offset(dir_rva)
    if off is None:
        return imports, libraries
    thunk_fmt, thunk_size = ("<Q", 8) if is64 else ("<I", 4)
    ordinal_flag = 1 << 63 if is64 else 1 << 31
    for i in range(MAX_IMPORT_DESCRIPTORS):
        d = off + 20 * i
        if not rd.fits(d, 20):
            break
        original_first_thunk, _, _, name_rva, first_thunk = rd.unpack("<IIIII", d)
        if original_first_thunk == 0 and name_rva == 0 and first_thunk == 0:
            break
        name_off = rvas.offset(name_rva)
        raw_name = rd.cstring(name_off) if name_off is not None else None
        if not raw_name:
            continue
        library = _decode_name(raw_name).lower()
        libraries.append(library)
        thunk_rva = original_first_thunk or first_thunk
        t_off = rvas.offset(thunk_rva) if thunk_rva else None
        if t_off is None:
            continue
        for j in range(MAX_THUNKS):
            p = t_off + thunk_size * j
            if not rd.fits(p, thunk_size):
                break
            (value,) = rd.unpack(thunk_fmt, p)
            if value == 0:
                break
            if value & ordinal_flag:
                symbol = f"ordinal{value & 0xFFFF}"
            else:
                hn_off = rvas.offset(value & 0x7FFFFFFF)
                raw_sym = rd.cstring(hn_off + 2) if hn_off is not None else None
                if raw_sym is None:
                    continue
                symbol = _decode_name(raw_sym)
            imports.append(ImportEntry(library, symbol))
    return imports, libraries


def _parse_exports(rd: _Reader, rvas: _RvaMap, dir_rva: int) -> list[str]:
    if dir_rva == 0:
        return []
    off = rvas.offset(dir_rva)
    if off is None or not rd.fits(off, 40):
        return []
    number_of_names, _, address_of_names = rd.unpack("<III", off + 24)
    names_off = rvas.offset(address_of_names)
    if names_off is None:
        return []
    exports = []
    for i in range(min(number_of_names, MAX_EXPORT_NAMES)):
        p = names_off + 4 * i
        if not rd.fits(p, 4):
            break
        (name_rva,) = rd.unpack("<I", p)
        n_off = rvas.offset(name_rva)
        raw = rd.cstring(n_off) if n_off is not None else None
        if raw is None:
            continue
        exports.append(_decode_name(raw))
    return exports


def _parse_optional(rd: _Reader, off: int, size: int) -> tuple[OptionalHeaderInfo, list[DataDirectory]] | str:
    if not rd.fits(off, 2) or size < 2:
        return "truncated_optional_header"
    (magic,) = rd.unpack("<H", off)
    if magic not in (PE32_MAGIC, PE32_PLUS_MAGIC):
        return "bad_optional_magic"
    is64 = magic == PE32_PLUS_MAGIC
    fixed = 112 if is64 else 96
    if size < fixed or not rd.fits(off, fixed):
        return "truncated_optional_header"
    (major_linker, minor_linker, size_of_code, size_of_init, size_of_uninit,
     entry, base_of_code) = rd.unpack("<BBIIIII", off + 2)
    image_base = rd.unpack("<Q", off + 24)[0] if is64 else rd.unpack("<I", off + 28)[0]
    (_, _, major_os, minor_os, major_img, minor_img, major_sub, minor_sub, _,
     size_of_image, size_of_headers, checksum, subsystem, dll_chars) = rd.unpack("<IIHHHHHHIIIIHH", off + 32)
    if is64:
        stack_res, stack_commit, heap_res, heap_commit = rd.unpack("<QQQQ", off + 72)
        (n_rva,) = rd.unpack("<I", off + 108)
    else:
        stack_res, stack_commit, heap_res, heap_commit = rd.unpack("<IIII", off + 72)
        (n_rva,) = rd.unpack("<I", off + 92)
    info = OptionalHeaderInfo(
        magic=magic,
        subsystem=subsystem,
        dll_characteristics=dll_chars,
        size_of_code=size_of_code,
        size_of_headers=size_of_headers,
        size_of_image=size_of_image,
        major_image_version=major_img,
        minor_image_version=minor_img,
        major_linker_version=major_linker,
        minor_linker_version=minor_linker,
        major_os_version=major_os,
        minor_os_version=minor_os,
        major_subsystem_version=major_sub,
        minor_subsystem_version=minor_sub,
        size_of_initialized_data=size_of_init,
        size_of_uninitialized_data=size_of_uninit,
        address_of_entry_point=entry,
        base_of_code=base_of_code,
        image_base=image_base,
        checksum=checksum,
        size_of_stack_reserve=stack_res,
        size_of_stack_commit=stack_commit,
        size_of_heap_reserve=heap_res,
        size_of_heap_commit=heap_commit,
        number_of_rva_and_sizes=n_rva,
    )
    directories = _empty_directories()
    dd_off = off + fixed
    room = (size - fixed) // 8
    for i in range(min(n_rva, 16, room)):
        p = dd_off + 8 * i
        if not rd.fits(p, 8):
            break
        va, sz = rd.unpack("<II", p)
        directories[i] = DataDirectory(DATA_DIRECTORY_NAMES[i], va, sz)
    return info, directories


def parse_pe(raw: RawBinary | bytes) -> ParsedPe | ParseDegraded:
    """Parse PE headers, sections, imports and exports.

    Never raises on malformed content; returns :class:`ParseDegraded` with a
    reason code such as ``truncated_pe_header`` instead.
    """
    data = raw.bytes if isinstance(raw, RawBinary) else bytes(raw)
    rd = _Reader(data)
    if rd.size == 0:
        return ParseDegraded("empty")
    if data[:2] != b"MZ":
        return ParseDegraded("not_mz")
    if rd.size < 64:
        return ParseDegraded("truncated_dos_header")
    (e_lfanew,) = rd.unpack("<I", 0x3C)
    if e_lfanew == 0 or not rd.fits(e_lfanew, 24):
        return ParseDegraded("truncated_pe_header", dos_ok=True)
    if data[e_lfanew:e_lfanew + 4] != b"PE\x00\x00":
        return ParseDegraded("bad_pe_signature", dos_ok=True)

    machine, n_sections, timestamp, _, n_symbols, opt_size, characteristics = rd.unpack("<HHIIIHH", e_lfanew + 4)
    coff = CoffHeader(machine, n_sections, timestamp, characteristics, n_symbols, opt_size)
    opt_off = e_lfanew + 24
    parsed_opt = _parse_optional(rd, opt_off, opt_size)
    if isinstance(parsed_opt, str):
        return ParseDegraded(parsed_opt, dos_ok=True, coff=coff)
    optional, directories = parsed_opt

    table_off = opt_off + opt_size
    n_read = min(n_sections, MAX_SECTIONS)
    headers = []
    for i in range(n_read):
        p = table_off + 40 * i
        if not rd.fits(p, 40):
            break
        name_raw, vsize, va, rsize, ptr, _, _, _, _, chars = rd.unpack("<8sIIIIIIHHI", p)
        headers.append((_decode_name(name_raw.split(b"\x00", 1)[0]), vsize, va, rsize, ptr, chars))

    entry = optional.address_of_entry_point
    entry_idx = None
    for i, (_, vsize, va, rsize, _, _) in enumerate(headers):
        if va <= entry < va + max(vsize, rsize):
            entry_idx = i
            break
    if entry_idx is None:
        for i, h in enumerate(headers):
            if h[5] & SCN_MEM_EXECUTE:
                entry_idx = i
                break

    sections = []
    rva_ranges = []
    raw_end = 0
    for i, (name, vsize, va, rsize, ptr, chars) in enumerate(headers):
        start = min(ptr, rd.size)
        chunk = data[start:min(ptr + rsize, rd.size)]
        raw_end = max(raw_end, start + len(chunk))
        rva_ranges.append((va, vsize, start, len(chunk)))
        sections.append(SectionInfo(
            name=name,
            raw_size=len(chunk),
            virtual_size=vsize,
            entropy=section_entropy(chunk),
            characteristics=chars,
            is_entry_section=i == entry_idx,
            virtual_address=va,
            pointer_to_raw_data=ptr,
        ))

    if len(headers) < n_read:
        return ParseDegraded("truncated_section_table", True, coff, optional, sections)
    if n_sections > MAX_SECTIONS:
        return ParseDegraded("too_many_sections", True, coff, optional, sections)

    rvas = _RvaMap(rva_ranges, optional.size_of_headers, rd.size)
    is64 = optional.is_pe32_plus
    imports, libraries = _parse_imports(rd, rvas, directories[1].virtual_address, is64)
    exports = _parse_exports(rd, rvas, directories[0].virtual_address)
    header_end = table_off + 40 * n_read
    overlay = max(0, rd.size - max(raw_end, header_end)) if sections else 0
    return ParsedPe(
        dos_ok=True,
        coff=coff,
        optional=optional,
        sections=sections,
        imports=imports,
        exports=exports,
        data_directories=directories,
        overlay_size=overlay,
        import_libraries=libraries,
    )
