"""Knowledge-base persistence: manifests, the feature cache and the
``.aptreg`` model container."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .dimred import LdaModel
from .errors import (
    CorruptContainer, DuplicateHash, HashMismatch, MalformedRow, TriageError, VersionMismatch,
)
from .features.extract import SIDECAR_SUFFIX, FeatureVector, content_hash, extract_features
from .features.pe import parse_pe, read_function_sidecar
from .features.schema import FeatureSchema
from .iforest import IsolationForest, IsolationTree
from .triage import ClassifierEntry, ClassifierRegistry, ForestParams

PathLike = Union[str, Path]

NON_APT_LABEL = "non-APT"
_HEX = re.compile(r"^[0-9a-fA-F]+$")


# -- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    sha256: str
    label: str
    md5: str = ""
    notes: str = ""

    @property
    def key(self) -> str:
        return self.sha256 or self.md5

    @property
    def is_apt(self) -> bool:
        return self.label != NON_APT_LABEL


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def classes(self) -> list[str]:
        return sorted({e.label for e in self.entries if e.is_apt})

    def census(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.label] = out.get(e.label, 0) + 1
        return dict(sorted(out.items()))

    def apt(self) -> "Manifest":
        return Manifest(tuple(e for e in self.entries if e.is_apt))

    def non_apt(self) -> "Manifest":
        return Manifest(tuple(e for e in self.entries if not e.is_apt))


def _check_hash(value: str, length: int, row: int, column: str) -> str:
    if value and (len(value) != length or not _HEX.match(value)):
        raise MalformedRow(row, f"{column} must be {length} hex characters")
    return value.lower()


def load_manifest(path: PathLike) -> Manifest:
    """Read a ``path,sha256,label`` CSV; ``md5`` and ``notes`` columns are
    optional, and ``md5`` may stand in for ``sha256``.  Relative sample
    paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedRow(1, "missing header")
        cols = [h.strip().lower() for h in header]
        if "path" not in cols or "label" not in cols or not ({"sha256", "md5"} & set(cols)):
            raise MalformedRow(1, "header needs path, label and sha256 (or md5) columns")
        idx = {c: i for i, c in enumerate(cols)}
        entries, seen = [], set()
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(cols):
                raise MalformedRow(row_no, f"expected {len(cols)} fields, got {len(row)}")
            get = lambda c: row[idx[c]].strip() if c in idx else ""
            sha = _check_hash(get("sha256"), 64, row_no, "sha256")
            md5 = _check_hash(get("md5"), 32, row_no, "md5")
            label = get("label")
            if not label:
                raise MalformedRow(row_no, "empty label")
            if not get("path"):
                raise MalformedRow(row_no, "empty path")
            if not (sha or md5):
                raise MalformedRow(row_no, "no hash given")
            key = sha or md5
            if key in seen:
                raise DuplicateHash(f"row {row_no}: hash {key} listed twice")
            seen.add(key)
            p = Path(get("path"))
            entries.append(ManifestEntry(p if p.is_absolute() else base / p, sha, label,
                                         md5, get("notes")))
    return Manifest(tuple(entries))


def write_manifest(manifest: Manifest, path: PathLike) -> None:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "sha256", "label"])
    for e in manifest:
        w.writerow([os.path.relpath(e.path, path.parent), e.sha256, e.label])
    atomic_write(path, buf.getvalue().encode("utf-8"))


def atomic_write(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- feature cache ----------------------------------------------------------

@dataclass
class CacheResult:
    vectors: list[Optional[FeatureVector]]
    errors: dict[int, TriageError | OSError | ValueError] = field(default_factory=dict)
    extracted: int = 0
    hits: int = 0


class FeatureCache:
    """Content-addressed vector store: ``<root>/<hh>/<sha256>.fv``."""

    def __init__(self, root: PathLike):
        self.root = Path(root)

    def path_for(self, sha256: str) -> Path:
        return self.root / sha256[:2] / f"{sha256}.fv"

    def get(self, sha256: str, schema_version: str, sidecar: Optional[str]) -> Optional[FeatureVector]:
        p = self.path_for(sha256)
        try:
            blob = p.read_bytes()
        except FileNotFoundError:
            return None
        head, sep, body = blob.partition(b"\n")
        try:
            meta = json.loads(head)
        except json.JSONDecodeError:
            return None
        if (not sep or meta.get("schema_version") != schema_version
                or meta.get("sidecar") != sidecar or len(body) != 8 * meta.get("n", -1)):
            return None
        return FeatureVector(schema_version, np.frombuffer(body, dtype="<f8").copy(), sha256)

    def put(self, fv: FeatureVector, sidecar: Optional[str]) -> None:
        meta = {"n": len(fv), "sample_id": fv.sample_id, "schema_version": fv.schema_version,
                "sidecar": sidecar}
        head = json.dumps(meta, sort_keys=True).encode()
        atomic_write(self.path_for(fv.sample_id),
                     head + b"\n" + np.asarray(fv.values, dtype="<f8").tobytes())


def _sidecar_for(path: Path) -> tuple[Optional[list], Optional[str]]:
    side = path.with_name(path.name + SIDECAR_SUFFIX)
    if not side.is_file():
        return None, None
    text = side.read_bytes()
    return read_function_sidecar(text.decode("utf-8")), hashlib.sha256(text).hexdigest()


def cache_features(manifest: Manifest, schema: FeatureSchema, cache_dir: Optional[PathLike] = None,
                   verify_hashes: bool = True) -> CacheResult:
    """Vectors for every manifest entry, in manifest order.

    Failures are collected per entry (by index) rather than raised.
    """
    cache = FeatureCache(cache_dir) if cache_dir is not None else None
    res = CacheResult([None] * len(manifest))
    for i, entry in enumerate(manifest):
        try:
            raw = entry.path.read_bytes()
            sha = content_hash(raw)
            if verify_hashes:
                if entry.sha256 and entry.sha256 != sha:
                    raise HashMismatch(f"{entry.path}: sha256 {sha} != manifest {entry.sha256}")
                if entry.md5 and not entry.sha256 and hashlib.md5(raw).hexdigest() != entry.md5:
                    raise HashMismatch(f"{entry.path}: md5 differs from manifest")
            functions, side_digest = _sidecar_for(entry.path)
            fv = cache.get(sha, schema.digest, side_digest) if cache else None
            if fv is not None:
                res.hits += 1
            else:
                fv = extract_features(parse_pe(raw, functions=functions), schema)
                res.extracted += 1
                if cache:
                    cache.put(fv, side_digest)
            res.vectors[i] = fv
        except (TriageError, OSError, ValueError) as exc:
            res.errors[i] = exc
    return res


# -- model container --------------------------------------------------------

MAGIC = b"APTREG\n"
FORMAT_VERSION = 1
_TRAILER = b"SHA256"


def _pack(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    specs, blobs = [], []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        specs.append([name, a.dtype.str, list(a.shape)])
        blobs.append(a.tobytes())
    head = json.dumps({"arrays": specs, "meta": meta}, sort_keys=True).encode()
    return struct.pack("<I", len(head)) + head + b"".join(blobs)


def _unpack(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    (n,) = struct.unpack_from("<I", blob, 0)
    doc = json.loads(blob[4:4 + n])
    off = 4 + n
    arrays = {}
    for name, dt, shape in doc["arrays"]:
        dtype = np.dtype(dt)
        size = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if off + size > len(blob):
            raise CorruptContainer(f"array {name} truncated")
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=size // dtype.itemsize,
                                     offset=off).reshape(shape).copy()
        off += size
    if off != len(blob):
        raise CorruptContainer("trailing bytes in section")
    return doc["meta"], arrays


def forest_to_bytes(forest: IsolationForest) -> bytes:
    meta = {
        "class_name": forest.class_name, "contamination": forest.contamination,
        "dim": forest.dim, "height_limits": [t.height_limit for t in forest.trees],
        "rng_seed": forest.rng_seed, "subsample_size": forest.subsample_size,
        "threshold": forest.threshold,
    }
    arrays = {"node_counts": np.array([t.n_nodes for t in forest.trees], dtype=np.int64)}
    for attr in ("feature", "threshold", "left", "right", "size", "depth"):
        arrays[attr] = np.concatenate([getattr(t, attr) for t in forest.trees])
    return _pack(meta, arrays)


def forest_from_bytes(blob: bytes) -> IsolationForest:
    meta, a = _unpack(blob)
    bounds = np.concatenate([[0], np.cumsum(a["node_counts"])])
    trees = []
    for i, h in enumerate(meta["height_limits"]):
        s = slice(bounds[i], bounds[i + 1])
        trees.append(IsolationTree(a["feature"][s], a["threshold"][s], a["left"][s],
                                   a["right"][s], a["size"][s], a["depth"][s], h))
    return IsolationForest(tuple(trees), meta["subsample_size"], meta["contamination"],
                           meta["threshold"], meta["rng_seed"], meta["dim"], meta["class_name"])


def _lda_to_bytes(lda: LdaModel) -> bytes:
    meta = {"class_names": list(lda.class_names), "epsilon": lda.epsilon,
            "schema_version": lda.schema_version}
    return _pack(meta, {"projection": lda.projection, "eigenvalues": lda.eigenvalues,
                        "class_means": lda.class_means, "global_mean": lda.global_mean})


def _lda_from_bytes(blob: bytes) -> LdaModel:
    meta, a = _unpack(blob)
    return LdaModel(a["projection"], a["eigenvalues"], tuple(meta["class_names"]),
                    a["class_means"], a["global_mean"], meta["epsilon"], meta["schema_version"])


def _section(name: str, payload: bytes) -> bytes:
    n = name.encode()
    return struct.pack("<I", len(n)) + n + struct.pack("<Q", len(payload)) + payload


def registry_to_bytes(registry: ClassifierRegistry, metadata: Optional[dict] = None) -> bytes:
    header = {
        "classes": list(registry.class_names),
        "format_version": FORMAT_VERSION,
        "input_dim": registry.input_dim,
        "metadata": metadata or {},
        "projection": "lda" if registry.lda is not None else "passthrough",
        "registry_version": registry.registry_version,
        "schema_version": registry.schema_version,
    }
    out = bytearray(MAGIC)
    out += json.dumps(header, sort_keys=True).encode() + b"\n"
    if registry.lda is not None:
        out += _section("lda", _lda_to_bytes(registry.lda))
    for name, entry in registry.classifiers.items():
        out += _section(f"forest:{name}", forest_to_bytes(entry.forest))
        out += _section(f"entry:{name}", json.dumps(
            {"params": entry.params.to_dict(), "tuning": entry.tuning}, sort_keys=True).encode())
    out += _TRAILER + hashlib.sha256(bytes(out)).digest()
    return bytes(out)


def read_container_header(blob: bytes) -> dict:
    if not blob.startswith(MAGIC):
        raise CorruptContainer("not a model container (bad magic)")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CorruptContainer("truncated header")
    try:
        return json.loads(blob[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise CorruptContainer(f"unreadable header: {exc}") from exc


def registry_from_bytes(blob: bytes) -> tuple[ClassifierRegistry, dict]:
    header = read_container_header(blob)
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"container format {header.get('format_version')}, this build reads {FORMAT_VERSION}")
    tail = len(_TRAILER) + 32
    if len(blob) < tail or blob[-tail:-32] != _TRAILER:
        raise CorruptContainer("missing checksum trailer (truncated file?)")
    if hashlib.sha256(blob[:-tail]).digest() != blob[-32:]:
        raise CorruptContainer("checksum mismatch")
    body = blob[blob.index(b"\n", len(MAGIC)) + 1:-tail]
    sections, off = {}, 0
    try:
        while off < len(body):
            (n,) = struct.unpack_from("<I", body, off)
            name = body[off + 4:off + 4 + n].decode()
            (size,) = struct.unpack_from("<Q", body, off + 4 + n)
            start = off + 12 + n
            sections[name] = body[start:start + size]
            off = start + size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptContainer(f"bad section table: {exc}") from exc
    try:
        lda = _lda_from_bytes(sections["lda"]) if header["projection"] == "lda" else None
        entries = {}
        for name in header["classes"]:
            info = json.loads(sections[f"entry:{name}"])
            entries[name] = ClassifierEntry(forest_from_bytes(sections[f"forest:{name}"]),
                                            ForestParams(**info["params"]), info["tuning"])
        reg = ClassifierRegistry(lda, entries, header["schema_version"], header["input_dim"],
                                 header["registry_version"])
    except (KeyError, TypeError, ValueError, struct.error) as exc:
        raise CorruptContainer(f"inconsistent container contents: {exc!r}") from exc
    return reg, header.get("metadata", {})


def save_registry(registry: ClassifierRegistry, path: PathLike, metadata: Optional[dict] = None) -> None:
    atomic_write(path, registry_to_bytes(registry, metadata))


def load_registry(path: PathLike) -> ClassifierRegistry:
    return load_registry_with_metadata(path)[0]


def load_registry_with_metadata(path: PathLike) -> tuple[ClassifierRegistry, dict]:
    return registry_from_bytes(Path(path).read_bytes())


def iter_sample_paths(inputs: Iterable[PathLike]) -> list[Path]:
    """Expand directories (recursively, sorted) and skip sidecar files."""
    out = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            out += sorted(q for q in p.rglob("*") if q.is_file() and not q.name.endswith(SIDECAR_SUFFIX))
        else:
            out.append(p)
    return out
