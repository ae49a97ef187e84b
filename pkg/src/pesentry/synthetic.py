"""Deterministic synthetic PE corpus.

Files are small but structurally valid PE32/PE32+ images. Each class draws
imports, section names, strings and payload entropy from its own pools, and
always imports one class-specific marker library, so the classes are
learnably separable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import group_slice, hash_bucket

FILE_ALIGN = 0x200
SECTION_ALIGN = 0x1000
IMAGE_BASE_32 = 0x400000
IMAGE_BASE_64 = 0x140000000

SCN_CODE = 0x60000020  # CNT_CODE | MEM_EXECUTE | MEM_READ
SCN_RDATA = 0x40000040  # CNT_INITIALIZED_DATA | MEM_READ
SCN_DATA = 0xC0000040  # + MEM_WRITE

DOS_STUB = b"This program cannot be run in DOS mode.\r\r\n$"


def _align(n: int, a: int) -> int:
    return (n + a - 1) // a * a


@dataclass
class Section:
    name: str
    data: bytes
    characteristics: int
    virtual_size: int | None = None


@dataclass
class PeBuilder:
    """Assembles a PE image; imports and exports get their own sections."""

    pe32_plus: bool = False
    timestamp: int = 0
    linker_version: tuple[int, int] = (14, 0)
    os_version: tuple[int, int] = (6, 0)
    image_version: tuple[int, int] = (0, 0)
    subsystem_version: tuple[int, int] = (6, 0)
    subsystem: int = 2
    dll_characteristics: int = 0x8140
    characteristics: int | None = None
    sections: list[Section] = field(default_factory=list)
    imports: list[tuple[str, list[str | int]]] = field(default_factory=list)
    exports: list[str] = field(default_factory=list)
    export_name: str = "module.dll"
    # data-directory index -> name of the section it covers
    directory_sections: dict[int, str] = field(default_factory=dict)
    overlay: bytes = b""
    import_section_name: str = ".idata"
    export_section_name: str = ".edata"

    def add_section(self, name: str, data: bytes, characteristics: int, virtual_size: int | None = None):
        self.sections.append(Section(name, data, characteristics, virtual_size))

    def _import_blob(self, rva: int) -> tuple[bytes, tuple[int, int], tuple[int, int]]:
        tsize = 8 if self.pe32_plus else 4
        tfmt = "<Q" if self.pe32_plus else "<I"
        ordinal_flag = 1 << 63 if self.pe32_plus else 1 << 31
        desc_size = 20 * (len(self.imports) + 1)
        # layout: descriptors | ILTs | IATs | names
        thunk_tables = [tsize * (len(syms) + 1) for _, syms in self.imports]
        ilt_start = desc_size
        iat_start = ilt_start + sum(thunk_tables)
        names_start = iat_start + sum(thunk_tables)
        names = bytearray()
        thunk_values = []
        dll_name_rvas = []
        for lib, syms in self.imports:
            dll_name_rvas.append(rva + names_start + len(names))
            names += lib.encode() + b"\x00"
            values = []
            for s in syms:
                if isinstance(s, int):
                    values.append(ordinal_flag | s)
                else:
                    if len(names) % 2:
                        names += b"\x00"
                    values.append(rva + names_start + len(names))
                    names += struct.pack("<H", 0) + s.encode() + b"\x00"
            thunk_values.append(values)
        blob = bytearray(names_start + len(names))
        ilt_off, iat_off = ilt_start, iat_start
        for i, values in enumerate(thunk_values):
            struct.pack_into("<IIIII", blob, 20 * i, rva + ilt_off, 0, 0, dll_name_rvas[i], rva + iat_off)
            for j, v in enumerate(values):
                struct.pack_into(tfmt, blob, ilt_off + tsize * j, v)
                struct.pack_into(tfmt, blob, iat_off + tsize * j, v)
            ilt_off += thunk_tables[i]
            iat_off += thunk_tables[i]
        blob[names_start:] = names
        return bytes(blob), (rva, desc_size), (rva + iat_start, names_start - iat_start)

    def _export_blob(self, rva: int) -> tuple[bytes, tuple[int, int]]:
        names = sorted(self.exports)
        n = len(names)
        funcs_off = 40
        names_off = funcs_off + 4 * n
        ords_off = names_off + 4 * n
        strings_off = ords_off + 2 * n
        strings = bytearray(self.export_name.encode() + b"\x00")
        name_rvas = []
        for s in names:
            name_rvas.append(rva + strings_off + len(strings))
            strings += s.encode() + b"\x00"
        blob = bytearray(strings_off + len(strings))
        struct.pack_into(
            "<IIHHIIIIIII", blob, 0,
            0, self.timestamp, 0, 0, rva + strings_off, 1, n, n,
            rva + funcs_off, rva + names_off, rva + ords_off,
        )
        for i in range(n):
            # every export points at the start of the first section
            struct.pack_into("<I", blob, funcs_off + 4 * i, SECTION_ALIGN)
            struct.pack_into("<I", blob, names_off + 4 * i, name_rvas[i])
            struct.pack_into("<H", blob, ords_off + 2 * i, i)
        blob[strings_off:] = strings
        return bytes(blob), (rva, len(blob))

    def build(self) -> bytes:
        sections = list(self.sections)
        n_sections = len(sections) + bool(self.imports) + bool(self.exports)
        opt_size = 240 if self.pe32_plus else 224
        e_lfanew = 0x80
        size_of_headers = _align(e_lfanew + 24 + opt_size + 40 * n_sections, FILE_ALIGN)

        directories = [(0, 0)] * 16
        rva = SECTION_ALIGN
        laid_out = []
        for s in sections:
            laid_out.append((s, rva))
            rva += _align(max(s.virtual_size or len(s.data), 1), SECTION_ALIGN)
        if self.imports:
            blob, imp_dir, iat_dir = self._import_blob(rva)
            s = Section(self.import_section_name, blob, SCN_RDATA)
            laid_out.append((s, rva))
            directories[1], directories[12] = imp_dir, iat_dir
            rva += _align(len(blob), SECTION_ALIGN)
        if self.exports:
            blob, exp_dir = self._export_blob(rva)
            s = Section(self.export_section_name, blob, SCN_RDATA)
            laid_out.append((s, rva))
            directories[0] = exp_dir
            rva += _align(len(blob), SECTION_ALIGN)
        size_of_image = rva
        for idx, name in self.directory_sections.items():
            for s, va in laid_out:
                if s.name == name:
                    directories[idx] = (va, len(s.data))
                    break

        code = [(s, va) for s, va in laid_out if s.characteristics & 0x20000000]
        entry = code[0][1] if code else 0
        base_of_code = entry
        size_of_code = sum(_align(len(s.data), FILE_ALIGN) for s, _ in code)
        size_of_init = sum(_align(len(s.data), FILE_ALIGN) for s, _ in laid_out if s.characteristics & 0x40)

        out = bytearray(size_of_headers)
        out[0:2] = b"MZ"
        struct.pack_into("<H", out, 2, 0x90)
        struct.pack_into("<I", out, 0x3C, e_lfanew)
        out[0x4E:0x4E + len(DOS_STUB)] = DOS_STUB
        out[e_lfanew:e_lfanew + 4] = b"PE\x00\x00"
        machine = 0x8664 if self.pe32_plus else 0x14C
        chars = self.characteristics
        if chars is None:
            chars = 0x0022 if self.pe32_plus else 0x0102
            if self.exports:
                chars |= 0x2000
        struct.pack_into("<HHIIIHH", out, e_lfanew + 4, machine, n_sections, self.timestamp, 0, 0, opt_size, chars)

        o = e_lfanew + 24
        magic = 0x20B if self.pe32_plus else 0x10B
        struct.pack_into("<HBBIIIII", out, o, magic, *self.linker_version, size_of_code, size_of_init, 0, entry, base_of_code)
        if self.pe32_plus:
            struct.pack_into("<Q", out, o + 24, IMAGE_BASE_64)
        else:
            data_vas = [va for s, va in laid_out if not s.characteristics & 0x20000000]
            struct.pack_into("<II", out, o + 24, data_vas[0] if data_vas else 0, IMAGE_BASE_32)
        struct.pack_into(
            "<IIHHHHHHIIIIHH", out, o + 32,
            SECTION_ALIGN, FILE_ALIGN, *self.os_version, *self.image_version, *self.subsystem_version, 0,
            size_of_image, size_of_headers, 0, self.subsystem, self.dll_characteristics,
        )
        if self.pe32_plus:
            struct.pack_into("<QQQQII", out, o + 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
            dd = o + 112
        else:
            struct.pack_into("<IIIIII", out, o + 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
            dd = o + 96
        for i, (va, size) in enumerate(directories):
            struct.pack_into("<II", out, dd + 8 * i, va, size)

        table = o + opt_size
        raw_ptr = size_of_headers
        body = bytearray()
        for i, (s, va) in enumerate(laid_out):
            raw_size = _align(len(s.data), FILE_ALIGN) if s.data else 0
            vsize = s.virtual_size if s.virtual_size is not None else len(s.data)
            struct.pack_into(
                "<8sIIIIIIHHI", out, table + 40 * i,
                s.name.encode()[:8], vsize, va, raw_size, raw_ptr if raw_size else 0, 0, 0, 0, 0, s.characteristics,
            )
            body += s.data + bytes(raw_size - len(s.data))
            raw_ptr += raw_size
        return bytes(out + body + self.overlay)


FAMILIES = ("trojan", "worm", "backdoor", "ransomware", "other")
CLASSES = ("benign",) + FAMILIES


@dataclass(frozen=True)
class ClassProfile:
    marker_library: str
    marker_symbols: tuple[str, ...]
    libraries: dict[str, tuple[str, ...]]
    section_names: tuple[str, ...]
    strings: tuple[bytes, ...]
    payload_noise: tuple[float, float]  # range of the uniform-noise share in payload bytes
    packed_blob: float  # probability of an extra high-entropy section
    export_prob: float
    linker_versions: tuple[tuple[int, int], ...]
    timestamp_range: tuple[int, int]
    overlay_prob: float


COMMON_LIBRARIES = {
    "kernel32.dll": ("GetProcAddress", "LoadLibraryA", "ExitProcess", "GetModuleHandleA", "VirtualAlloc",
                     "CreateFileW", "ReadFile", "WriteFile", "CloseHandle", "GetLastError", "Sleep",
                     "GetTickCount", "HeapAlloc", "HeapFree"),
    "msvcrt.dll": ("malloc", "free", "printf", "memcpy", "strlen", "memset", "_exit"),
}

COMMON_STRINGS = (
    b"GetProcAddress failed", b"Microsoft Visual C++ Runtime Library", b"invalid argument",
    b"runtime error R6002", b"%s\\%s.tmp", b"<assembly xmlns=\"urn:schemas-microsoft-com:asm.v1\">",
)

PROFILES: dict[str, ClassProfile] = {
    "benign": ClassProfile(
        marker_library="comctl32.dll",
        marker_symbols=("InitCommonControlsEx", "ImageList_Create"),
        libraries={
            "user32.dll": ("MessageBoxW", "CreateWindowExW", "ShowWindow", "GetMessageW", "DispatchMessageW",
                           "LoadIconW", "RegisterClassExW"),
            "gdi32.dll": ("SelectObject", "DeleteObject", "BitBlt", "CreateFontW"),
            "shell32.dll": ("SHGetFolderPathW", "DragQueryFileW"),
            "ole32.dll": ("CoInitialize", "CoCreateInstance"),
        },
        section_names=(".text", ".rdata", ".data", ".rsrc", ".reloc", ".pdata"),
        strings=(b"C:\\Program Files\\Contoso\\Viewer\\viewer.exe", b"Copyright (c) Contoso Ltd. All rights reserved.",
                 b"FileDescription", b"ProductVersion 10.0.19041", b"Open document", b"Save changes before closing?"),
        payload_noise=(0.15, 0.35),
        packed_blob=0.05,
        export_prob=0.4,
        linker_versions=((14, 16), (14, 29), (14, 36)),
        timestamp_range=(1_550_000_000, 1_700_000_000),
        overlay_prob=0.05,
    ),
    "trojan": ClassProfile(
        marker_library="urlmon.dll",
        marker_symbols=("URLDownloadToFileA", "URLOpenStreamA"),
        libraries={
            "wininet.dll": ("InternetOpenA", "InternetOpenUrlA", "InternetReadFile", "HttpSendRequestA"),
            "shell32.dll": ("ShellExecuteA",),
            "advapi32.dll": ("GetUserNameA", "RegOpenKeyExA"),
        },
        section_names=(".text", ".data", ".rsrc", "UPX0", "UPX1", ".aspack"),
        strings=(b"http://update-check.example/payload.bin", b"Mozilla/4.0 (compatible; MSIE 6.0)",
                 b"%APPDATA%\\svchost.exe", b"GET /gate.php?id=%s HTTP/1.1", b"POST /upload HTTP/1.1"),
        payload_noise=(0.45, 0.7),
        packed_blob=0.6,
        export_prob=0.05,
        linker_versions=((6, 0), (9, 0), (10, 0)),
        timestamp_range=(1_200_000_000, 1_600_000_000),
        overlay_prob=0.3,
    ),
    "worm": ClassProfile(
        marker_library="netapi32.dll",
        marker_symbols=("NetShareEnum", "NetServerEnum"),
        libraries={
            "ws2_32.dll": ("socket", "connect", "send", "recv", "gethostbyname", "closesocket"),
            "mpr.dll": ("WNetAddConnection2A", "WNetOpenEnumA"),
            "advapi32.dll": ("RegSetValueExA", "RegCreateKeyExA"),
        },
        section_names=(".text", ".data", ".rdata", ".wdata", ".idata2"),
        strings=(b"\\\\%s\\ADMIN$\\system32", b"[autorun]\r\nopen=setup.exe", b"autorun.inf",
                 b"HKEY_LOCAL_MACHINE\\Software\\Microsoft\\Windows\\CurrentVersion\\Run", b"USB Drive Copy"),
        payload_noise=(0.3, 0.55),
        packed_blob=0.2,
        export_prob=0.05,
        linker_versions=((6, 0), (8, 0)),
        timestamp_range=(1_100_000_000, 1_450_000_000),
        overlay_prob=0.1,
    ),
    "backdoor": ClassProfile(
        marker_library="iphlpapi.dll",
        marker_symbols=("GetAdaptersInfo", "GetTcpTable"),
        libraries={
            "ws2_32.dll": ("bind", "listen", "accept", "socket", "recv", "send", "WSAStartup"),
            "advapi32.dll": ("CreateServiceA", "OpenSCManagerA", "StartServiceCtrlDispatcherA"),
            "wininet.dll": ("InternetConnectA", "HttpOpenRequestA"),
        },
        section_names=(".text", ".rdata", ".data", ".tls", ".rsrc", ".sdata"),
        strings=(b"cmd.exe /c %s > nul", b"https://c2.example/beacon", b"HKEY_CURRENT_USER\\Software\\Classes\\mscfile",
                 b"reverse shell ready", b"Global\\{A3F0-SVC-MUTEX}"),
        payload_noise=(0.35, 0.6),
        packed_blob=0.3,
        export_prob=0.15,
        linker_versions=((9, 0), (12, 0), (14, 0)),
        timestamp_range=(1_300_000_000, 1_650_000_000),
        overlay_prob=0.15,
    ),
    "ransomware": ClassProfile(
        marker_library="bcrypt.dll",
        marker_symbols=("BCryptEncrypt", "BCryptGenRandom", "BCryptOpenAlgorithmProvider"),
        libraries={
            "advapi32.dll": ("CryptAcquireContextW", "CryptGenKey", "CryptEncrypt", "CryptDestroyKey"),
            "kernel32.dll": ("FindFirstFileW", "FindNextFileW", "MoveFileExW", "DeleteFileW"),
            "rstrtmgr.dll": ("RmStartSession", "RmShutdown"),
        },
        section_names=(".text", ".rdata", ".data", ".crypt", ".rsrc", ".enc"),
        strings=(b"Your files have been encrypted!", b"Send 0.5 bitcoin to the wallet below",
                 b"vssadmin delete shadows /all /quiet", b"README_DECRYPT.txt", b".locked",
                 b"All your documents, photos and databases are encrypted"),
        payload_noise=(0.55, 0.8),
        packed_blob=0.9,
        export_prob=0.02,
        linker_versions=((14, 0), (14, 10), (11, 0)),
        timestamp_range=(1_450_000_000, 1_700_000_000),
        overlay_prob=0.25,
    ),
    "other": ClassProfile(
        marker_library="psapi.dll",
        marker_symbols=("EnumProcesses", "GetModuleBaseNameA"),
        libraries={
            "shlwapi.dll": ("PathFileExistsA", "StrStrIA"),
            "user32.dll": ("GetAsyncKeyState", "SetWindowsHookExA", "GetForegroundWindow"),
            "wininet.dll": ("InternetOpenA", "FtpPutFileA"),
        },
        section_names=(".text", ".data", ".bss", ".CRT", ".rdata"),
        strings=(b"keylog.txt", b"ftp://drop.example/incoming", b"[ENTER]", b"[BACKSPACE]",
                 b"Downloader v2 ready"),
        payload_noise=(0.25, 0.6),
        packed_blob=0.35,
        export_prob=0.1,
        linker_versions=((7, 10), (10, 0), (14, 0)),
        timestamp_range=(1_250_000_000, 1_680_000_000),
        overlay_prob=0.2,
    ),
}


# one fixed, skewed byte distribution standing in for compiled code; shared by every class
_CODE_BYTES = np.random.default_rng(0x5EED).dirichlet(np.full(256, 0.3))


def _payload(rng: np.random.Generator, size: int, noise_fraction: float) -> bytes:
    """Code-like bytes with a ``noise_fraction`` share of uniform random bytes mixed in."""
    code = rng.choice(256, size=size, p=_CODE_BYTES)
    noise = rng.integers(0, 256, size=size)
    return np.where(rng.random(size) < noise_fraction, noise, code).astype(np.uint8).tobytes()


def _data_section(rng: np.random.Generator, strings: list[bytes], size: int) -> bytes:
    out = bytearray()
    for s in strings:
        out += s + b"\x00" * int(rng.integers(1, 8))
    filler = rng.integers(0, 16, size=max(0, size - len(out)), dtype=np.uint8)
    filler[rng.random(filler.size) < 0.6] = 0
    return bytes(out + filler.tobytes())


def synthesize_pe(class_name: str, rng: np.random.Generator) -> bytes:
    prof = PROFILES[class_name]
    b = PeBuilder(
        pe32_plus=bool(rng.random() < 0.3),
        timestamp=int(rng.integers(*prof.timestamp_range)),
        linker_version=prof.linker_versions[int(rng.integers(len(prof.linker_versions)))],
        subsystem=2 if rng.random() < 0.6 else 3,
    )

    lo, hi = prof.payload_noise
    text = _payload(rng, int(rng.integers(700, 3000)), rng.uniform(lo, hi))
    b.add_section(".text", text, SCN_CODE)
    extra_names = [n for n in prof.section_names if n != ".text"]
    n_extra = int(rng.integers(1, min(4, len(extra_names)) + 1))
    chosen_strings = [s for s in prof.strings if rng.random() < 0.6] or [prof.strings[int(rng.integers(len(prof.strings)))]]
    chosen_strings += [s for s in COMMON_STRINGS if rng.random() < 0.3]
    for i, name in enumerate(rng.choice(extra_names, size=n_extra, replace=False)):
        if i == 0:
            data = _data_section(rng, chosen_strings, int(rng.integers(300, 1500)))
            b.add_section(str(name), data, SCN_DATA)
        else:
            data = _payload(rng, int(rng.integers(200, 1200)), rng.uniform(lo, hi))
            b.add_section(str(name), data, SCN_RDATA)
    if rng.random() < prof.packed_blob:
        # empty IMAGE_RESOURCE_DIRECTORY header, then opaque high-entropy payload
        blob = bytes(16) + rng.integers(0, 256, size=int(rng.integers(1500, 4000)), dtype=np.uint8).tobytes()
        b.add_section(".rsrc" if ".rsrc" in prof.section_names else ".blob", blob, SCN_RDATA)
        b.directory_sections[2] = b.sections[-1].name

    imports: dict[str, list[str]] = {}
    k_common = int(rng.integers(3, 9))
    imports["kernel32.dll"] = sorted(rng.choice(COMMON_LIBRARIES["kernel32.dll"], size=k_common, replace=False).tolist())
    if rng.random() < 0.6:
        imports["msvcrt.dll"] = sorted(rng.choice(COMMON_LIBRARIES["msvcrt.dll"], size=3, replace=False).tolist())
    for lib, syms in prof.libraries.items():
        if rng.random() < 0.65:
            k = int(rng.integers(1, len(syms) + 1))
            picked = rng.choice(syms, size=k, replace=False).tolist()
            imports[lib] = sorted(set(imports.get(lib, [])) | set(picked))
    k = int(rng.integers(1, len(prof.marker_symbols) + 1))
    imports[prof.marker_library] = sorted(rng.choice(prof.marker_symbols, size=k, replace=False).tolist())
    b.imports = [(lib, syms) for lib, syms in imports.items()]

    if rng.random() < prof.export_prob:
        n = int(rng.integers(1, 12))
        b.exports = [f"{class_name[:3]}Export{j}" for j in range(n)]
        b.export_name = f"{class_name}.dll"
    if rng.random() < prof.overlay_prob:
        b.overlay = rng.integers(0, 256, size=int(rng.integers(64, 1024)), dtype=np.uint8).tobytes()
    return b.build()


def marker_feature(class_name: str) -> int:
    """Vector index of the import-library bucket holding the class marker."""
    lib = PROFILES[class_name].marker_library
    return group_slice("imports").start + hash_bucket(lib, 256)


@dataclass(frozen=True)
class CorpusProfile:
    n_benign: int = 0
    n_trojan: int = 0
    n_worm: int = 0
    n_backdoor: int = 0
    n_ransomware: int = 0
    n_other: int = 0

    @classmethod
    def uniform(cls, n: int) -> CorpusProfile:
        return cls(n, n, n, n, n, n)

    def counts(self) -> dict[str, int]:
        return {c: getattr(self, f"n_{c}") for c in CLASSES}


def generate_synthetic_corpus(profile: CorpusProfile, seed: int, out_dir: str | Path) -> Path:
    """Write PE files under ``out_dir/<class>/`` plus ``out_dir/manifest.jsonl``.

    Returns the manifest path. Output is byte-identical for a given seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for class_idx, (class_name, n) in enumerate(profile.counts().items()):
        if n < 0:
            raise ValueError(f"negative count for {class_name}")
        if n:
            (out_dir / class_name).mkdir(exist_ok=True)
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence([seed, class_idx, i]))
            data = synthesize_pe(class_name, rng)
            rel = f"{class_name}/{class_name}_{i:05d}.exe"
            (out_dir / rel).write_bytes(data)
            lines.append({
                "path": rel,
                "label": "benign" if class_name == "benign" else "malicious",
                "family": None if class_name == "benign" else class_name,
                "source": f"synthetic-seed{seed}",
                "sha256": hashlib.sha256(data).hexdigest(),
            })
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(line, sort_keys=True) + "\n" for line in lines))
    return manifest
