"""Minimal Portable Executable reader.

Only the structures the feature extractors need are decoded: the MS-DOS
header, the COFF file header, the optional header with its data directories,
the section table, the import and export tables.  Anything that is missing
from the file comes back as an explicit empty value; only broken headers
raise.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from ..errors import MalformedHeader, NotPe, Truncated

DOS_FIELDS = (
    "e_magic", "e_cblp", "e_cp", "e_crlc", "e_cparhdr", "e_minalloc",
    "e_maxalloc", "e_ss", "e_sp", "e_csum", "e_ip", "e_cs", "e_lfarlc",
    "e_ovno", "e_res", "e_oemid", "e_oeminfo", "e_res2", "e_lfanew",
)
FILE_HEADER_FIELDS = (
    "Machine", "NumberOfSections", "TimeDateStamp", "PointerToSymbolTable",
    "NumberOfSymbols", "SizeOfOptionalHeader", "Characteristics",
)
OPTIONAL_HEADER_FIELDS = (
    "Magic", "MajorLinkerVersion", "MinorLinkerVersion", "SizeOfCode",
    "SizeOfInitializedData", "SizeOfUninitializedData", "AddressOfEntryPoint",
    "BaseOfCode", "BaseOfData", "ImageBase", "SectionAlignment",
    "FileAlignment", "MajorOperatingSystemVersion",
    "MinorOperatingSystemVersion", "MajorImageVersion", "MinorImageVersion",
    "MajorSubsystemVersion", "MinorSubsystemVersion", "Win32VersionValue",
    "SizeOfImage", "SizeOfHeaders", "CheckSum", "Subsystem",
    "DllCharacteristics", "SizeOfStackReserve", "SizeOfStackCommit",
    "SizeOfHeapReserve", "SizeOfHeapCommit", "LoaderFlags",
    "NumberOfRvaAndSizes",
)
DIRECTORY_NAMES = (
    "EXPORT", "IMPORT", "RESOURCE", "EXCEPTION", "SECURITY", "BASERELOC",
    "DEBUG", "ARCHITECTURE", "GLOBALPTR", "TLS", "LOAD_CONFIG",
    "BOUND_IMPORT", "IAT", "DELAY_IMPORT", "COM_DESCRIPTOR", "RESERVED",
)

PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B

_DOS = struct.Struct("<2s13H4H2H10HI")
_FILE = struct.Struct("<HHIIIHH")
# (magic .. BaseOfCode [, BaseOfData]), ImageBase, middle block, stack/heap, tail
_OPT32 = struct.Struct("<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII")
_OPT64 = struct.Struct("<HBBIIIIIQIIHHHHHHIIIIHHQQQQII")
_SECTION = struct.Struct("<8sIIIIIIHHI")
_IMPORT_DESC = struct.Struct("<IIIII")
_EXPORT_DIR = struct.Struct("<IIHHIIIIIII")

MAX_IMPORT_DESCRIPTORS = 4096
MAX_THUNKS = 65536
MAX_EXPORTS = 65536
MAX_NAME = 512

SCN_CNT_CODE = 0x00000020
SCN_MEM_EXECUTE = 0x20000000

StringExtractor = Callable[[bytes], Sequence[tuple[str, str]]]
STRING_ORIGINS = ("plain", "obfuscated", "decoded")

_ASCII_RUN = re.compile(rb"[\x20-\x7e]{5,}")


def ascii_strings(raw: bytes) -> list[tuple[str, str]]:
    """Default string extractor: printable ASCII runs of at least 5 chars."""
    return [(m.group().decode("ascii"), "plain") for m in _ASCII_RUN.finditer(raw)]


@dataclass(frozen=True)
class Section:
    name: str
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_pointer: int
    characteristics: int

    @property
    def extent(self) -> int:
        return max(self.virtual_size, self.raw_size)

    @property
    def executable(self) -> bool:
        return bool(self.characteristics & (SCN_CNT_CODE | SCN_MEM_EXECUTE))


@dataclass(frozen=True)
class PeArtifact:
    raw_bytes: bytes
    dos_header: dict
    file_header: dict
    optional_header: Optional[dict]
    data_directories: tuple[tuple[str, int, int], ...]
    sections: tuple[Section, ...] = ()
    imports: tuple[tuple[str, tuple[str, ...]], ...] = ()
    exports: tuple[str, ...] = ()
    export_rvas: tuple[int, ...] = ()
    functions: tuple[tuple[int, int], ...] = ()
    strings: tuple[tuple[str, str], ...] = ()

    @property
    def is_pe32plus(self) -> bool:
        return bool(self.optional_header) and self.optional_header["Magic"] == PE32PLUS_MAGIC

    def directory(self, name: str) -> tuple[int, int]:
        for dname, rva, size in self.data_directories:
            if dname == name:
                return rva, size
        return 0, 0


class _Image:
    """RVA-to-file-offset mapping plus bounded reads."""

    def __init__(self, raw: bytes, sections: Sequence[Section], size_of_headers: int):
        self.raw = raw
        self.sections = sections
        self.size_of_headers = size_of_headers

    def offset(self, rva: int) -> Optional[int]:
        for s in self.sections:
            if s.virtual_address <= rva < s.virtual_address + s.extent:
                off = rva - s.virtual_address + s.raw_pointer
                return off if off < len(self.raw) else None
        if rva < max(self.size_of_headers, 1) and rva < len(self.raw):
            return rva
        return None

    def read(self, rva: int, n: int) -> Optional[bytes]:
        off = self.offset(rva)
        if off is None or off + n > len(self.raw):
            return None
        return self.raw[off:off + n]

    def cstring(self, rva: int) -> Optional[str]:
        off = self.offset(rva)
        if off is None:
            return None
        end = self.raw.find(b"\0", off, off + MAX_NAME)
        if end < 0:
            end = min(len(self.raw), off + MAX_NAME)
        return self.raw[off:end].decode("latin-1")


def _parse_dos(raw: bytes) -> dict:
    vals = _DOS.unpack_from(raw, 0)
    out = dict(zip(DOS_FIELDS[:14], vals[:14]))
    out["e_res"] = tuple(vals[14:18])
    out["e_oemid"], out["e_oeminfo"] = vals[18], vals[19]
    out["e_res2"] = tuple(vals[20:30])
    out["e_lfanew"] = vals[30]
    return out


def _parse_optional(raw: bytes, off: int, size: int) -> tuple[dict, list[tuple[str, int, int]]]:
    (magic,) = struct.unpack_from("<H", raw, off)
    if magic == PE32_MAGIC:
        st = _OPT32
        names = OPTIONAL_HEADER_FIELDS
    elif magic == PE32PLUS_MAGIC:
        st = _OPT64
        names = tuple(n for n in OPTIONAL_HEADER_FIELDS if n != "BaseOfData")
    else:
        raise MalformedHeader(f"unknown optional header magic 0x{magic:x}")
    if size < st.size:
        raise MalformedHeader(
            f"SizeOfOptionalHeader {size} smaller than the fixed {st.size}-byte part")
    hdr = dict(zip(names, st.unpack_from(raw, off)))
    hdr.setdefault("BaseOfData", 0)
    n_dirs = min(hdr["NumberOfRvaAndSizes"], len(DIRECTORY_NAMES), (size - st.size) // 8)
    dirs = []
    for i in range(n_dirs):
        rva, dsize = struct.unpack_from("<II", raw, off + st.size + 8 * i)
        dirs.append((DIRECTORY_NAMES[i], rva, dsize))
    return hdr, dirs


def _parse_sections(raw: bytes, off: int, count: int) -> list[Section]:
    out = []
    for i in range(count):
        name, vsize, va, rsize, rptr, _, _, _, _, chars = _SECTION.unpack_from(raw, off + 40 * i)
        out.append(Section(name.rstrip(b"\0").decode("latin-1"), vsize, va, rsize, rptr, chars))
    return out


def _parse_imports(img: _Image, rva: int, size: int, pe32plus: bool) -> list[tuple[str, tuple[str, ...]]]:
    if not rva or not size:
        return []
    ordinal_flag = 1 << 63 if pe32plus else 1 << 31
    thunk_fmt, thunk_size = ("<Q", 8) if pe32plus else ("<I", 4)
    imports = []
    for i in range(MAX_IMPORT_DESCRIPTORS):
        blob = img.read(rva + i * _IMPORT_DESC.size, _IMPORT_DESC.size)
        if blob is None:
            break
        oft, _, _, name_rva, ft = _IMPORT_DESC.unpack(blob)
        if not (oft or name_rva or ft):
            break
        dll = img.cstring(name_rva)
        if dll is None:
            continue
        apis = []
        thunk = oft or ft
        for j in range(MAX_THUNKS):
            tb = img.read(thunk + j * thunk_size, thunk_size)
            if tb is None:
                break
            (val,) = struct.unpack(thunk_fmt, tb)
            if val == 0:
                break
            if val & ordinal_flag:
                apis.append(f"ord{val & 0xFFFF}")
            else:
                api = img.cstring((val & 0x7FFFFFFF) + 2)
                if api is not None:
                    apis.append(api)
        imports.append((dll.lower(), tuple(apis)))
    return imports


def _parse_exports(img: _Image, rva: int, size: int) -> tuple[list[str], list[int]]:
    if not rva or not size:
        return [], []
    blob = img.read(rva, _EXPORT_DIR.size)
    if blob is None:
        return [], []
    (_, _, _, _, _, base, n_funcs, n_names,
     funcs_rva, names_rva, ords_rva) = _EXPORT_DIR.unpack(blob)
    n_funcs = min(n_funcs, MAX_EXPORTS)
    n_names = min(n_names, MAX_EXPORTS)
    func_rvas = []
    for i in range(n_funcs):
        b = img.read(funcs_rva + 4 * i, 4)
        if b is None:
            break
        func_rvas.append(struct.unpack("<I", b)[0])
    named = {}
    for i in range(n_names):
        nb = img.read(names_rva + 4 * i, 4)
        ob = img.read(ords_rva + 2 * i, 2)
        if nb is None or ob is None:
            break
        name = img.cstring(struct.unpack("<I", nb)[0])
        idx = struct.unpack("<H", ob)[0]
        if name is not None and idx not in named:
            named[idx] = name
    names, rvas = [], []
    for i, frva in enumerate(func_rvas):
        if frva == 0:
            continue
        names.append(named.get(i, f"ord{base + i}"))
        rvas.append(frva)
    return names, rvas


def sweep_functions(sections: Sequence[Section], seeds: Iterable[int]) -> list[tuple[int, int]]:
    """Seeded linear sweep: each seed inside an executable section starts a
    function that runs to the next seed or the end of its section."""
    out = []
    for sec in sections:
        if not sec.executable:
            continue
        lo, hi = sec.virtual_address, sec.virtual_address + sec.extent
        inside = sorted({s for s in seeds if lo <= s < hi})
        for start, nxt in zip(inside, inside[1:] + [hi]):
            if nxt > start:
                out.append((start, nxt - start))
    return sorted(out)


def read_function_sidecar(text: str) -> list[tuple[int, int]]:
    """Parse ``start length`` (or ``start,length``) decimal pairs, one per line."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"sidecar line {lineno}: expected two integers")
        start, length = int(parts[0]), int(parts[1])
        if start < 0 or length < 1:
            raise ValueError(f"sidecar line {lineno}: start must be >= 0 and length >= 1")
        out.append((start, length))
    return out


def parse_pe(raw: bytes, *, functions: Optional[Sequence[tuple[int, int]]] = None,
             string_extractor: Optional[StringExtractor] = None) -> PeArtifact:
    """Decode ``raw`` into a :class:`PeArtifact`.

    ``functions`` is a precomputed (start, length) list; without one the
    entry point and exports seed :func:`sweep_functions`.  ``string_extractor``
    defaults to :func:`ascii_strings`.
    """
    if not raw:
        raise NotPe("empty input")
    if raw[:2] != b"MZ":
        raise NotPe("missing MZ signature")
    if len(raw) < _DOS.size:
        raise Truncated(f"file is {len(raw)} bytes, MS-DOS header needs {_DOS.size}")
    dos = _parse_dos(raw)
    pe_off = dos["e_lfanew"]
    if pe_off + 4 + _FILE.size > len(raw):
        raise Truncated(f"e_lfanew 0x{pe_off:x} points past end of file")
    if raw[pe_off:pe_off + 4] != b"PE\0\0":
        raise NotPe("missing PE signature")
    fh = dict(zip(FILE_HEADER_FIELDS, _FILE.unpack_from(raw, pe_off + 4)))
    opt_off = pe_off + 4 + _FILE.size
    opt_size = fh["SizeOfOptionalHeader"]
    if opt_off + opt_size > len(raw):
        raise Truncated("optional header runs past end of file")
    if opt_size:
        if opt_size < 2:
            raise MalformedHeader("SizeOfOptionalHeader too small to hold a magic")
        opt, dirs = _parse_optional(raw, opt_off, opt_size)
    else:
        opt, dirs = None, []
    sec_off = opt_off + opt_size
    if sec_off + _SECTION.size * fh["NumberOfSections"] > len(raw):
        raise Truncated("section table runs past end of file")
    sections = _parse_sections(raw, sec_off, fh["NumberOfSections"])

    img = _Image(raw, sections, opt["SizeOfHeaders"] if opt else 0)
    pe32plus = bool(opt) and opt["Magic"] == PE32PLUS_MAGIC
    dir_map = {name: (rva, size) for name, rva, size in dirs}
    imports = _parse_imports(img, *dir_map.get("IMPORT", (0, 0)), pe32plus)
    exports, export_rvas = _parse_exports(img, *dir_map.get("EXPORT", (0, 0)))

    if functions is None:
        seeds = list(export_rvas)
        if opt and opt["AddressOfEntryPoint"]:
            seeds.append(opt["AddressOfEntryPoint"])
        functions = sweep_functions(sections, seeds)
    extractor = string_extractor or ascii_strings
    strings = tuple((str(s), str(origin)) for s, origin in extractor(raw))
    for _, origin in strings:
        if origin not in STRING_ORIGINS:
            raise ValueError(f"string extractor produced unknown origin tag {origin!r}")

    return PeArtifact(
        raw_bytes=raw,
        dos_header=dos,
        file_header=fh,
        optional_header=opt,
        data_directories=tuple(dirs),
        sections=tuple(sections),
        imports=tuple(imports),
        exports=tuple(exports),
        export_rvas=tuple(export_rvas),
        functions=tuple((int(a), int(n)) for a, n in functions),
        strings=strings,
    )
