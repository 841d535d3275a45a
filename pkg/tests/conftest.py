import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pebuilder import PeSpec, SectionSpec, build_pe  # noqa: E402

TEXT = 0x60000020  # code, execute, read


def fixture_specs():
    """Three hand-crafted PE images used for golden and oracle checks."""
    code = b"\x55\x8b\xec" + b"\x90" * 61 + b"\xc3"
    plain32 = PeSpec(
        timestamp=0x5A5A5A5A,
        entry_point=0x1000,
        section_alignment=0x1000,
        sections=[
            SectionSpec(".text", code, TEXT),
            SectionSpec(".rdata", b"hello world\0configuration\0xy\0mutex_name_01\0"),
        ],
        imports=[("kernel32.dll", ["CreateFileA", "WriteFile", "CloseHandle"]),
                 ("ADVAPI32.dll", ["RegOpenKeyExA"])],
    )
    dll64 = PeSpec(
        pe32plus=True,
        characteristics=0x2022,
        entry_point=0x420,
        section_alignment=0x200,
        file_alignment=0x200,
        sections=[
            SectionSpec(".text", code * 4, TEXT),
            SectionSpec(".data", b"\0" * 64),
            SectionSpec(".data", b"\1" * 32),
        ],
        imports=[("KERNEL32.DLL", ["GetProcAddress", "LoadLibraryA"])],
        exports=["Install", "ServiceMain"],
        dos={"e_res": (1, 2, 3, 4), "e_oemid": 7},
    )
    bare = PeSpec(optional_header=False, timestamp=0, machine=0x14C, sections=[])
    return {"plain32": plain32, "dll64": dll64, "bare": bare}


@pytest.fixture(scope="session")
def fixtures():
    return {name: build_pe(spec) for name, spec in fixture_specs().items()}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def corpus_spec(label: str, i: int) -> PeSpec:
    """A family of PE images per label; members differ in timestamp, code
    length and embedded strings."""
    r = np.random.default_rng([sum(label.encode()), i])
    code = b"\x55\x8b\xec" + b"\x90" * int(r.integers(20, 200)) + b"\xc3"
    words = b"\0".join(b"string%05d" % int(r.integers(0, 99999)) for _ in range(int(r.integers(1, 8))))
    if label == "Alpha":
        return PeSpec(timestamp=int(r.integers(1 << 30)), entry_point=0x1000,
                      sections=[SectionSpec(".text", code, TEXT), SectionSpec(".rdata", words)],
                      imports=[("kernel32.dll", ["CreateFileA", "WriteFile"])])
    if label == "Beta":
        return PeSpec(pe32plus=True, characteristics=0x2022, timestamp=int(r.integers(1 << 30)),
                      sections=[SectionSpec(".text", code * 3, TEXT), SectionSpec(".data", words * 2)],
                      imports=[("KERNEL32.DLL", ["GetProcAddress", "LoadLibraryA"])],
                      exports=["Install"])
    if label == "Gamma":
        return PeSpec(timestamp=int(r.integers(1 << 30)), entry_point=0x2000,
                      sections=[SectionSpec(".text", code, TEXT), SectionSpec(".a", words),
                                SectionSpec(".b", words)],
                      imports=[("ws2_32.dll", ["socket", "connect", "send"])])
    return PeSpec(timestamp=int(r.integers(1 << 30)), subsystem=3,
                  sections=[SectionSpec(".code", code * 5, TEXT)])


def write_corpus(root: Path, counts: dict) -> Path:
    """Write samples plus ``manifest.csv`` under ``root``; returns the manifest."""
    import hashlib
    rows = ["path,sha256,label"]
    for label, n in counts.items():
        for i in range(n):
            raw = build_pe(corpus_spec(label, i))
            rel = f"samples/{label.replace('-', '_')}_{i}.exe"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            (root / rel).write_bytes(raw)
            rows.append(f"{rel},{hashlib.sha256(raw).hexdigest()},{label}")
    path = root / "manifest.csv"
    path.write_text("\n".join(rows) + "\n")
    return path
