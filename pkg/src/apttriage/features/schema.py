"""Feature schema: the ordered layout of the 330 feature slots.

The layout is data.  Watchlists and the function-length bucket table come
from a JSON file; the slot table is derived from them, and the schema is
identified by a hash of its content so every vector and model can be traced
back to the exact layout that produced it.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import Union

from ..errors import SchemaError
from .pe import FILE_HEADER_FIELDS, OPTIONAL_HEADER_FIELDS

GROUPS = (
    ("optional_header", 30),
    ("dos_header", 17),
    ("file_header", 7),
    ("string_stats", 3),
    ("imports", 158),
    ("function_lengths", 50),
    ("directories", 65),
)
GROUP_SIZES = dict(GROUPS)
N_FEATURES = sum(GROUP_SIZES.values())

DOS_FEATURE_FIELDS = (
    "e_cblp", "e_cp", "e_crlc", "e_cparhdr", "e_minalloc", "e_maxalloc",
    "e_ss", "e_sp", "e_csum", "e_ip", "e_cs", "e_lfarlc", "e_ovno",
    "reserved_sum", "e_oemid", "e_oeminfo", "e_lfanew",
)
STRING_FEATURES = ("plain", "obfuscated", "decoded")
IMPORT_COUNTERS = ("total_apis", "total_dlls", "total_exports")
DIRECTORY_PREFIX = "IMAGE_DIRECTORY_ENTRY_"
DLL_SUFFIXES = (".dll", ".drv", ".ocx", ".sys", ".exe", ".cpl")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Slot:
    index: int
    group: str
    name: str
    rule: str


def is_dll_entry(name: str) -> bool:
    return name.lower().endswith(DLL_SUFFIXES)


@dataclass(frozen=True)
class FeatureSchema:
    version: str
    dll_api_watchlist: tuple[str, ...]
    directory_watchlist: tuple[str, ...]
    function_length_buckets: tuple[float, ...]

    def __post_init__(self):
        if len(self.dll_api_watchlist) != GROUP_SIZES["imports"] - len(IMPORT_COUNTERS):
            raise SchemaError(
                f"dll_api_watchlist needs 155 entries, got {len(self.dll_api_watchlist)}")
        if len(self.directory_watchlist) != GROUP_SIZES["directories"]:
            raise SchemaError(
                f"directory_watchlist needs 65 entries, got {len(self.directory_watchlist)}")
        b = self.function_length_buckets
        if len(b) != GROUP_SIZES["function_lengths"]:
            raise SchemaError(f"function_length_buckets needs 50 bounds, got {len(b)}")
        if not all(x < y for x, y in zip(b, b[1:])) or b[-1] != math.inf:
            raise SchemaError("bucket bounds must be strictly ascending and end with inf")
        for label, items in (("dll_api_watchlist", self._watch_keys),
                             ("directory_watchlist", [d.lower() for d in self.directory_watchlist])):
            if len(set(items)) != len(items):
                raise SchemaError(f"{label} has duplicate entries")

    @property
    def _watch_keys(self) -> list[str]:
        return [w.lower() if is_dll_entry(w) else w for w in self.dll_api_watchlist]

    @cached_property
    def slots(self) -> tuple[Slot, ...]:
        names: list[tuple[str, str, str]] = []
        names += [("optional_header", f"optional_header.{f}", f"optional_header:{f}")
                  for f in OPTIONAL_HEADER_FIELDS]
        names += [("dos_header", f"dos_header.{f}", f"dos_header:{f}") for f in DOS_FEATURE_FIELDS]
        names += [("file_header", f"file_header.{f}", f"file_header:{f}") for f in FILE_HEADER_FIELDS]
        names += [("string_stats", f"string_stats.{o}", f"strings:origin={o}") for o in STRING_FEATURES]
        for w in self.dll_api_watchlist:
            kind = "dll" if is_dll_entry(w) else "api"
            names.append(("imports", f"imports.{kind}:{w}", f"imports:{kind}-occurrences"))
        names += [("imports", f"imports.{c}", f"imports:{c}") for c in IMPORT_COUNTERS]
        lo = 0
        for hi in self.function_length_buckets:
            label = f"[{lo},{'inf' if hi == math.inf else int(hi)})"
            names.append(("function_lengths", f"function_lengths.{label}", "functions:bucket-count"))
            lo = int(hi) if hi != math.inf else lo
        for d in self.directory_watchlist:
            kind = "directory" if d.startswith(DIRECTORY_PREFIX) else "section"
            names.append(("directories", f"directories.{kind}:{d}", f"directories:{kind}-size"))
        return tuple(Slot(i, g, n, r) for i, (g, n, r) in enumerate(names))

    @cached_property
    def group_ranges(self) -> dict[str, range]:
        out, start = {}, 0
        for group, size in GROUPS:
            out[group] = range(start, start + size)
            start += size
        return out

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "dll_api_watchlist": list(self.dll_api_watchlist),
            "directory_watchlist": list(self.directory_watchlist),
            "function_length_buckets": [
                "inf" if b == math.inf else int(b) if float(b).is_integer() else b
                for b in self.function_length_buckets],
        }

    @cached_property
    def digest(self) -> str:
        """Content hash identifying this exact layout (16 hex chars)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureSchema":
        try:
            buckets = tuple(math.inf if b in ("inf", None) else float(b)
                            for b in doc["function_length_buckets"])
            return cls(
                version=str(doc["version"]),
                dll_api_watchlist=tuple(doc["dll_api_watchlist"]),
                directory_watchlist=tuple(doc["directory_watchlist"]),
                function_length_buckets=buckets,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"invalid schema document: {exc}") from exc


def load_schema(path: PathLike) -> FeatureSchema:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return FeatureSchema.from_dict(doc)


@lru_cache(maxsize=1)
def default_schema() -> FeatureSchema:
    text = resources.files(__package__).joinpath("default_schema.json").read_text(encoding="utf-8")
    return FeatureSchema.from_dict(json.loads(text))
