"""Static feature extraction: one function per feature group."""
from __future__ import annotations

import bisect
import hashlib
from collections import Counter
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch
from .pe import FILE_HEADER_FIELDS, OPTIONAL_HEADER_FIELDS, PeArtifact
from .schema import (
    DIRECTORY_PREFIX, DOS_FEATURE_FIELDS, N_FEATURES, STRING_FEATURES,
    FeatureSchema, is_dll_entry,
)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    schema_version: str
    values: np.ndarray
    sample_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise DimensionMismatch("feature vector must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature vector contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (self.schema_version == other.schema_version
                and self.sample_id == other.sample_id
                and self.values.tobytes() == other.values.tobytes())

    __hash__ = None


def content_hash(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def extract_optional_header_features(pe: PeArtifact, schema: FeatureSchema) -> list[float]:
    hdr = pe.optional_header
    if not hdr:
        return [0.0] * len(OPTIONAL_HEADER_FIELDS)
    return [float(hdr.get(f, 0)) for f in OPTIONAL_HEADER_FIELDS]


def extract_dos_header_features(pe: PeArtifact, schema: FeatureSchema) -> list[float]:
    dos = pe.dos_header
    out = []
    for f in DOS_FEATURE_FIELDS:
        if f == "reserved_sum":
            out.append(float(sum(dos["e_res"]) + sum(dos["e_res2"])))
        else:
            out.append(float(dos[f]))
    return out


def extract_file_header_features(pe: PeArtifact, schema: FeatureSchema) -> list[float]:
    return [float(pe.file_header[f]) for f in FILE_HEADER_FIELDS]


def extract_string_statistics(pe: PeArtifact, schema: FeatureSchema) -> list[float]:
    counts = Counter(origin for _, origin in pe.strings)
    return [float(counts[o]) for o in STRING_FEATURES]


def extract_import_features(pe: PeArtifact, schema: FeatureSchema) -> list[float]:
    # DLL entries count the APIs imported from that DLL; API entries count
    # every import of that name regardless of the DLL providing it.
    per_dll: Counter = Counter()
    per_api: Counter = Counter()
    for dll, apis in pe.imports:
        per_dll[dll.lower()] += len(apis)
        per_api.update(apis)
    out = []
    for w in schema.dll_api_watchlist:
        out.append(float(per_dll[w.lower()] if is_dll_entry(w) else per_api[w]))
    total_apis = sum(len(apis) for _, apis in pe.imports)
    total_dlls = len({dll.lower() for dll, _ in pe.imports})
    out += [float(total_apis), float(total_dlls), float(len(pe.exports))]
    return out


def bucket_index(length: int, bounds) -> int:
    """Bucket i holds lengths in [bounds[i-1], bounds[i])."""
    return bisect.bisect_right(bounds, length)


def extract_function_length_features(pe: PeArtifact, schema: FeatureSchema) -> list[float]:
    bounds = schema.function_length_buckets
    counts = [0] * len(bounds)
    for _, length in pe.functions:
        counts[bucket_index(length, bounds)] += 1
    return [float(c) for c in counts]


def extract_directory_features(pe: PeArtifact, schema: FeatureSchema) -> list[float]:
    sizes: Counter = Counter()
    for name, _, size in pe.data_directories:
        sizes[DIRECTORY_PREFIX + name] += size
    for sec in pe.sections:
        sizes[sec.name.lower()] += sec.raw_size
    out = []
    for d in schema.directory_watchlist:
        key = d if d.startswith(DIRECTORY_PREFIX) else d.lower()
        out.append(float(sizes[key]))
    return out


GROUP_EXTRACTORS = (
    ("optional_header", extract_optional_header_features),
    ("dos_header", extract_dos_header_features),
    ("file_header", extract_file_header_features),
    ("string_stats", extract_string_statistics),
    ("imports", extract_import_features),
    ("function_lengths", extract_function_length_features),
    ("directories", extract_directory_features),
)


def extract_features(pe: PeArtifact, schema: FeatureSchema) -> FeatureVector:
    values: list[float] = []
    for _, fn in GROUP_EXTRACTORS:
        values += fn(pe, schema)
    assert len(values) == N_FEATURES
    return FeatureVector(schema.digest, np.array(values, dtype=np.float64),
                         content_hash(pe.raw_bytes))


SIDECAR_SUFFIX = ".functions"


def extract_path(path, schema: FeatureSchema, string_extractor=None) -> FeatureVector:
    """Read a sample (plus its ``.functions`` sidecar, if present) and extract."""
    from pathlib import Path

    from .pe import parse_pe, read_function_sidecar

    path = Path(path)
    raw = path.read_bytes()
    sidecar = path.with_name(path.name + SIDECAR_SUFFIX)
    functions = None
    if sidecar.is_file():
        functions = read_function_sidecar(sidecar.read_text(encoding="utf-8"))
    pe = parse_pe(raw, functions=functions, string_extractor=string_extractor)
    return extract_features(pe, schema)
