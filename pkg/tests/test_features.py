import hashlib
import math
import struct

import numpy as np
import pefile
import pytest
from hypothesis import given, settings, strategies as st

from apttriage.errors import DimensionMismatch, MalformedHeader, NotPe, SchemaError, Truncated
from apttriage.features import (
    GROUP_EXTRACTORS, N_FEATURES, FeatureSchema, FeatureVector, default_schema,
    extract_features, parse_pe,
)
from apttriage.features.extract import bucket_index, extract_path
from apttriage.features.pe import PeArtifact, read_function_sidecar, sweep_functions, Section
from apttriage.features.schema import GROUPS

from conftest import TEXT, fixture_specs
from oracles import count_ascii_runs
from pebuilder import PeSpec, SectionSpec, build_pe

SCHEMA = default_schema()


def slot(name):
    for s in SCHEMA.slots:
        if s.name == name:
            return s.index
    raise KeyError(name)


def vec(raw, **kw):
    return extract_features(parse_pe(raw, **kw), SCHEMA).values


# -- schema -----------------------------------------------------------------

def test_schema_group_sizes():
    sizes = [n for _, n in GROUPS]
    assert sizes == [30, 17, 7, 3, 158, 50, 65]
    assert N_FEATURES == 330
    assert len(SCHEMA.slots) == 330
    assert [s.index for s in SCHEMA.slots] == list(range(330))
    assert len({s.name for s in SCHEMA.slots}) == 330
    for group, r in SCHEMA.group_ranges.items():
        assert {SCHEMA.slots[i].group for i in r} == {group}


def test_schema_watchlists_and_buckets():
    assert len(SCHEMA.dll_api_watchlist) == 155
    assert len(SCHEMA.directory_watchlist) == 65
    b = SCHEMA.function_length_buckets
    assert len(b) == 50 and b[-1] == math.inf
    assert all(x < y for x, y in zip(b, b[1:]))


def test_schema_roundtrip_and_digest(tmp_path):
    doc = SCHEMA.to_dict()
    p = tmp_path / "s.json"
    import json
    p.write_text(json.dumps(doc))
    from apttriage.features import load_schema
    again = load_schema(p)
    assert again.digest == SCHEMA.digest
    doc["version"] = "other"
    assert FeatureSchema.from_dict(doc).digest != SCHEMA.digest


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(dll_api_watchlist=d["dll_api_watchlist"][:-1]),
    lambda d: d.update(directory_watchlist=d["directory_watchlist"] + ["x"]),
    lambda d: d.update(function_length_buckets=d["function_length_buckets"][:-1] + [10 ** 9]),
    lambda d: d.update(function_length_buckets=[5] + d["function_length_buckets"][1:]),
    lambda d: d["dll_api_watchlist"].__setitem__(1, d["dll_api_watchlist"][0].upper()),
    lambda d: d.pop("version"),
])
def test_schema_rejects_bad_documents(mutate):
    doc = SCHEMA.to_dict()
    mutate(doc)
    with pytest.raises(SchemaError):
        FeatureSchema.from_dict(doc)


# -- parsing errors and empties ----------------------------------------------

def test_random_bytes_not_pe(rng):
    with pytest.raises(NotPe):
        parse_pe(bytes(rng.integers(0, 256, 10, dtype=np.uint8)).replace(b"M", b"m"))
    with pytest.raises(NotPe):
        parse_pe(b"")


def test_truncated_and_malformed(fixtures):
    raw = fixtures["plain32"]
    with pytest.raises(Truncated):
        parse_pe(raw[:40])
    lfanew = struct.unpack_from("<I", raw, 0x3C)[0]
    with pytest.raises(Truncated):
        parse_pe(raw[:lfanew + 30])
    bad = bytearray(raw)
    struct.pack_into("<I", bad, 0x3C, len(raw) + 100)
    with pytest.raises(Truncated):
        parse_pe(bytes(bad))
    bad = bytearray(raw)
    bad[lfanew:lfanew + 2] = b"NE"
    with pytest.raises(NotPe):
        parse_pe(bytes(bad))
    bad = bytearray(raw)
    struct.pack_into("<H", bad, lfanew + 24, 0x999)
    with pytest.raises(MalformedHeader):
        parse_pe(bytes(bad))


def test_minimal_pe32plus_with_no_imports():
    pe = parse_pe(build_pe(PeSpec(pe32plus=True, sections=[SectionSpec(".text", b"\xc3", TEXT)])))
    assert pe.imports == ()
    assert pe.exports == ()
    assert len(pe.data_directories) == 16
    assert pe.is_pe32plus


def test_absent_optional_header_is_zeros(fixtures):
    pe = parse_pe(fixtures["bare"])
    assert pe.optional_header is None
    v = vec(fixtures["bare"])
    r = SCHEMA.group_ranges
    assert np.all(v[r["optional_header"].start:r["optional_header"].stop] == 0)
    assert np.all(v[r["imports"].start:r["imports"].stop] == 0)
    assert np.all(v[r["function_lengths"].start:r["function_lengths"].stop] == 0)
    assert np.all(v[r["directories"].start:r["directories"].stop] == 0)
    # only raw DOS/file header fields (plus the stub's text) are non-zero
    nz = {SCHEMA.slots[i].group for i in np.flatnonzero(v)}
    assert nz <= {"dos_header", "file_header", "string_stats"}


# -- cross-check against pefile ------------------------------------------------

@pytest.mark.parametrize("name", ["plain32", "dll64", "bare"])
def test_headers_match_pefile(fixtures, name):
    raw = fixtures[name]
    ref = pefile.PE(data=raw, fast_load=False)
    pe = parse_pe(raw)
    for f in ("Machine", "NumberOfSections", "TimeDateStamp", "SizeOfOptionalHeader",
              "Characteristics", "PointerToSymbolTable", "NumberOfSymbols"):
        assert pe.file_header[f] == getattr(ref.FILE_HEADER, f)
    for f in ("e_cblp", "e_cp", "e_lfarlc", "e_lfanew", "e_oemid", "e_maxalloc", "e_sp"):
        assert pe.dos_header[f] == getattr(ref.DOS_HEADER, f)
    if pe.optional_header is None:
        return
    for f, v in pe.optional_header.items():
        if f == "BaseOfData" and pe.is_pe32plus:
            continue
        ref_name = {"Win32VersionValue": "Reserved1"}.get(f, f)
        assert v == getattr(ref.OPTIONAL_HEADER, ref_name), f
    for (dname, rva, size), d in zip(pe.data_directories, ref.OPTIONAL_HEADER.DATA_DIRECTORY):
        assert (rva, size) == (d.VirtualAddress, d.Size)


@pytest.mark.parametrize("name", ["plain32", "dll64"])
def test_imports_exports_match_pefile(fixtures, name):
    raw = fixtures[name]
    ref = pefile.PE(data=raw)
    want = [(e.dll.decode().lower(), tuple(i.name.decode() for i in e.imports))
            for e in getattr(ref, "DIRECTORY_ENTRY_IMPORT", [])]
    assert list(parse_pe(raw).imports) == want
    exp = getattr(ref, "DIRECTORY_ENTRY_EXPORT", None)
    names = [s.name.decode() for s in exp.symbols] if exp else []
    assert list(parse_pe(raw).exports) == names


def test_kernel32_createfile_import(fixtures):
    pe = parse_pe(fixtures["plain32"])
    assert ("kernel32.dll", ("CreateFileA", "WriteFile", "CloseHandle")) in pe.imports


def test_spec_field_examples():
    raw = build_pe(PeSpec(entry_point=0x1000, section_alignment=0x200, file_alignment=0x200,
                          sections=[SectionSpec(".text", b"\xc3" * 10, TEXT)],
                          imports=[("kernel32.dll", ["CreateFileA"])]))
    ref = pefile.PE(data=raw)
    v = vec(raw)
    assert v[slot("optional_header.AddressOfEntryPoint")] == ref.OPTIONAL_HEADER.AddressOfEntryPoint == 4096
    assert v[slot("optional_header.SectionAlignment")] == ref.OPTIONAL_HEADER.SectionAlignment == 512
    assert v[slot("dos_header.e_lfarlc")] == ref.DOS_HEADER.e_lfarlc == 0x40
    assert v[slot("dos_header.e_cp")] == ref.DOS_HEADER.e_cp == 3
    assert v[slot("dos_header.reserved_sum")] == 0
    assert v[slot("directories.directory:IMAGE_DIRECTORY_ENTRY_IMPORT")] == \
        ref.OPTIONAL_HEADER.DATA_DIRECTORY[1].Size == 40

    raw = build_pe(PeSpec(pe32plus=True, timestamp=0, sections=[
        SectionSpec(".text", b"\xc3", TEXT), SectionSpec(".data", b"1"), SectionSpec(".rsrc", b"2")]))
    ref = pefile.PE(data=raw)
    v = vec(raw)
    assert v[slot("file_header.Machine")] == ref.FILE_HEADER.Machine == 34404
    assert v[slot("file_header.TimeDateStamp")] == 0
    assert v[slot("file_header.NumberOfSections")] == ref.FILE_HEADER.NumberOfSections == 3


# -- groups ---------------------------------------------------------------

def test_import_counters_4_apis_2_dlls_1_export():
    raw = build_pe(PeSpec(sections=[SectionSpec(".text", b"\xc3" * 32, TEXT)],
                          imports=[("kernel32.dll", ["CreateFileA", "ReadFile", "WriteFile"]),
                                   ("user32.dll", ["MessageBoxA"])],
                          exports=["Run"]))
    ref = pefile.PE(data=raw)
    n_api = sum(len(e.imports) for e in ref.DIRECTORY_ENTRY_IMPORT)
    n_dll = len(ref.DIRECTORY_ENTRY_IMPORT)
    n_exp = len(ref.DIRECTORY_ENTRY_EXPORT.symbols)
    v = vec(raw)
    got = [v[slot(f"imports.{c}")] for c in ("total_apis", "total_dlls", "total_exports")]
    assert got == [n_api, n_dll, n_exp] == [4, 2, 1]


def test_duplicate_api_occurrences_are_summed():
    raw = build_pe(PeSpec(sections=[SectionSpec(".text", b"\xc3", TEXT)],
                          imports=[("kernel32.dll", ["GetProcAddress"]),
                                   ("kernelbase.dll", ["GetProcAddress"])]))
    v = vec(raw)
    assert v[slot("imports.api:GetProcAddress")] == 2
    assert v[slot("imports.dll:kernel32.dll")] == 1
    assert v[slot("imports.total_dlls")] == 2


def test_import_case_insensitive():
    def build(name):
        return build_pe(PeSpec(sections=[SectionSpec(".text", b"\xc3", TEXT)],
                               imports=[(name, ["CreateFileA", "Sleep"])]))
    r = SCHEMA.group_ranges["imports"]
    a, b = vec(build("KERNEL32.DLL")), vec(build("kernel32.dll"))
    assert np.array_equal(a[r.start:r.stop], b[r.start:r.stop])


def test_duplicate_sections_sum_sizes(fixtures):
    pe = parse_pe(fixtures["dll64"])
    want = sum(s.raw_size for s in pe.sections if s.name == ".data")
    assert want > 0
    assert vec(fixtures["dll64"])[slot("directories.section:.data")] == want


def test_section_name_match_is_case_insensitive():
    raw = build_pe(PeSpec(sections=[SectionSpec(".TEXT", b"\xc3" * 700, TEXT)]))
    assert vec(raw)[slot("directories.section:.text")] == 1024


def test_string_counts():
    pe = parse_pe(build_pe(PeSpec()), string_extractor=lambda raw: [("a", "plain")] * 5 + [("b", "decoded")] * 2)
    r = SCHEMA.group_ranges["string_stats"]
    assert list(extract_features(pe, SCHEMA).values[r.start:r.stop]) == [5, 0, 2]
    empty = parse_pe(build_pe(PeSpec()), string_extractor=lambda raw: [])
    assert list(extract_features(empty, SCHEMA).values[r.start:r.stop]) == [0, 0, 0]
    with pytest.raises(ValueError):
        parse_pe(build_pe(PeSpec()), string_extractor=lambda raw: [("x", "weird")])


def test_plain_strings_match_bruteforce(fixtures):
    for raw in fixtures.values():
        assert vec(raw)[slot("string_stats.plain")] == count_ascii_runs(raw)


def test_three_embedded_strings():
    stub = b"\0" * 8
    raw = build_pe(PeSpec(stub=stub, sections=[
        SectionSpec(".rd", b"\0alpha1\0\x01beta22\x02gamma333\0ab\0")]))
    assert count_ascii_runs(raw) == 3
    assert vec(raw)[slot("string_stats.plain")] == 3


def test_function_buckets():
    b = SCHEMA.function_length_buckets
    r = SCHEMA.group_ranges["function_lengths"]
    fv = lambda fns: vec(build_pe(PeSpec()), functions=fns)[r.start:r.stop]
    assert np.all(fv([]) == 0)
    got = fv([(0, 3), (10, 3), (20, 900000)])
    assert got[0] == 2 and got[-1] == 1 and got.sum() == 3
    assert bucket_index(int(b[0]), b) == 1
    assert fv([(0, int(b[0]))])[1] == 1


@given(st.lists(st.integers(1, 2 ** 40), max_size=40))
@settings(max_examples=60, deadline=None)
def test_bucket_sum_equals_function_count(lengths):
    r = SCHEMA.group_ranges["function_lengths"]
    pe = PeArtifact(b"MZ", {}, {}, None, (), functions=tuple((i, n) for i, n in enumerate(lengths)))
    v = GROUP_EXTRACTORS[5][1](pe, SCHEMA)
    assert len(v) == 50 and sum(v) == len(lengths)
    assert sum(v) == len(pe.functions)
    assert r.stop - r.start == 50


def test_sweep_and_sidecar():
    text = Section(".text", 0x100, 0x1000, 0x200, 0x400, TEXT)
    data = Section(".data", 0x100, 0x2000, 0x200, 0x600, 0x40000040)
    assert sweep_functions([text, data], [0x1010, 0x1000, 0x2000, 0x1010]) == [(0x1000, 16), (0x1010, 0x1F0)]
    assert read_function_sidecar("# comment\n4096 16\n4112,32\n\n") == [(4096, 16), (4112, 32)]
    with pytest.raises(ValueError):
        read_function_sidecar("1 2 3")
    with pytest.raises(ValueError):
        read_function_sidecar("5 0")


def test_extract_path_reads_sidecar(tmp_path, fixtures):
    p = tmp_path / "s.exe"
    p.write_bytes(fixtures["plain32"])
    r = SCHEMA.group_ranges["function_lengths"]
    without = extract_path(p, SCHEMA).values[r.start:r.stop]
    (tmp_path / "s.exe.functions").write_text("4096 3\n4200 3\n")
    with_ = extract_path(p, SCHEMA).values[r.start:r.stop]
    assert without.sum() == 1 and with_[0] == 2 and with_.sum() == 2


# -- whole-vector properties ----------------------------------------------------

def test_groups_concatenate_to_vector(fixtures):
    for raw in fixtures.values():
        pe = parse_pe(raw)
        parts = [np.asarray(fn(pe, SCHEMA)) for _, fn in GROUP_EXTRACTORS]
        assert [len(p) for p in parts] == [n for _, n in GROUPS]
        fv = extract_features(pe, SCHEMA)
        assert np.array_equal(np.concatenate(parts), fv.values)
        assert fv.sample_id == hashlib.sha256(raw).hexdigest()
        assert fv.schema_version == SCHEMA.digest


def test_counter_slots_are_nonnegative_integers(fixtures):
    for raw in fixtures.values():
        v = vec(raw)
        for g in ("string_stats", "imports", "function_lengths", "directories"):
            r = SCHEMA.group_ranges[g]
            part = v[r.start:r.stop]
            assert np.all(part >= 0) and np.all(part == np.floor(part))


def test_feature_vector_contract():
    with pytest.raises(DimensionMismatch):
        FeatureVector("s", np.zeros((2, 2)), "x")
    with pytest.raises(ValueError):
        FeatureVector("s", np.array([1.0, np.nan]), "x")
    fv = FeatureVector("s", [1, 2, 3], "x")
    with pytest.raises(ValueError):
        fv.values[0] = 5
    assert fv == FeatureVector("s", np.array([1.0, 2.0, 3.0]), "x")
    assert fv != FeatureVector("t", [1, 2, 3], "x")


@st.composite
def pe_specs(draw):
    names = st.sampled_from([".text", ".data", ".rdata", ".rsrc", ".reloc", "UPX0", ".weird"])
    secs = [SectionSpec(draw(names), draw(st.binary(max_size=300)),
                        draw(st.sampled_from([TEXT, 0x40000040])))
            for _ in range(draw(st.integers(0, 4)))]
    apis = st.lists(st.sampled_from(["CreateFileA", "Sleep", "VirtualAlloc", "Foo", "WinExec"]),
                    min_size=1, max_size=4)
    dlls = st.sampled_from(["kernel32.dll", "USER32.dll", "ws2_32.dll", "odd.dll"])
    imports = draw(st.lists(st.tuples(dlls, apis), max_size=3))
    exports = draw(st.lists(st.sampled_from(["A1", "B2", "Main"]), unique=True, max_size=3))
    return PeSpec(pe32plus=draw(st.booleans()), timestamp=draw(st.integers(0, 2 ** 32 - 1)),
                  entry_point=draw(st.integers(0, 0x3000)), sections=secs, imports=imports,
                  exports=exports)


@given(pe_specs())
@settings(max_examples=60, deadline=None)
def test_random_fixtures_shape_and_determinism(spec):
    raw = build_pe(spec)
    a = extract_features(parse_pe(raw), SCHEMA)
    b = extract_features(parse_pe(bytes(raw)), SCHEMA)
    assert len(a.values) == 330
    assert np.all(np.isfinite(a.values))
    assert a.values.tobytes() == b.values.tobytes()
