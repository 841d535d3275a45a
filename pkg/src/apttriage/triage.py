"""Per-APT classifier registry and triage verdicts.

A registry is an immutable snapshot: one shared LDA projection plus one
isolation forest per APT class.  Mutations return a new registry with a
bumped ``registry_version``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import iforest
from .dimred import DEFAULT_EPSILON, LabeledDataset, LdaModel, fit_lda
from .errors import DegenerateProjection, DimensionMismatch, EmptyClass, SchemaMismatch, TriageError
from .features.extract import FeatureVector

log = logging.getLogger(__name__)

NON_APT = "non-APT"


@dataclass(frozen=True)
class ForestParams:
    contamination: float = iforest.DEFAULT_CONTAMINATION
    n_estimators: int = iforest.DEFAULT_ESTIMATORS
    subsample_size: int = iforest.DEFAULT_SUBSAMPLE
    seed: int = 0

    def to_dict(self) -> dict:
        return {"contamination": self.contamination, "n_estimators": self.n_estimators,
                "subsample_size": self.subsample_size, "seed": self.seed}


@dataclass(frozen=True)
class ClassifierEntry:
    forest: iforest.IsolationForest
    params: ForestParams
    tuning: Optional[dict] = None


@dataclass(frozen=True, eq=False)
class ClassifierRegistry:
    lda: Optional[LdaModel]
    classifiers: Mapping[str, ClassifierEntry]
    schema_version: str
    input_dim: int
    registry_version: int = 1

    def __post_init__(self):
        ordered = dict(sorted(self.classifiers.items()))
        object.__setattr__(self, "classifiers", MappingProxyType(ordered))
        for name, entry in ordered.items():
            if entry.forest.dim != self.output_dim:
                raise DimensionMismatch(
                    f"forest {name!r} has dim {entry.forest.dim}, projection gives {self.output_dim}")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(self.classifiers)

    @property
    def output_dim(self) -> int:
        return self.lda.output_dim if self.lda is not None else self.input_dim

    def project(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.input_dim:
            raise DimensionMismatch(f"expected {self.input_dim} features, got {X.shape[-1]}")
        return self.lda.transform(X) if self.lda is not None else X

    def accept_matrix(self, X) -> tuple[np.ndarray, np.ndarray]:
        """(inlier, score) matrices of shape (n_samples, n_classes), columns
        in ``class_names`` order."""
        Z = np.atleast_2d(self.project(X))
        inl = np.zeros((Z.shape[0], len(self.classifiers)), dtype=bool)
        sc = np.zeros((Z.shape[0], len(self.classifiers)))
        for j, entry in enumerate(self.classifiers.values()):
            inl[:, j], sc[:, j] = entry.forest.predict(Z)
        return inl, sc


@dataclass(frozen=True)
class TriageVerdict:
    sample_id: str
    decision: Optional[str]  # APT class name, or None for non-APT
    per_class: Mapping[str, tuple[bool, float]] = field(default_factory=dict)
    registry_version: int = 0
    error: Optional[tuple[str, str]] = None
    source: str = ""

    @property
    def is_apt(self) -> bool:
        return self.decision is not None

    @property
    def accepting(self) -> list[tuple[str, float]]:
        return sorted(((c, s) for c, (ok, s) in self.per_class.items() if ok),
                      key=lambda cs: (cs[1], cs[0]))

    def to_record(self) -> dict:
        rec: dict = {"sample_id": self.sample_id}
        if self.source:
            rec["source"] = self.source
        if self.error is not None:
            rec["decision"] = "error"
            rec["error"] = {"kind": self.error[0], "message": self.error[1]}
            return rec
        rec["decision"] = "APT" if self.is_apt else NON_APT
        rec["apt_class"] = self.decision
        rec["accepted"] = [[c, s] for c, s in self.accepting]
        rec["scores"] = {c: s for c, (_, s) in sorted(self.per_class.items())}
        rec["registry_version"] = self.registry_version
        return rec


def decide(names: Sequence[str], inlier: Sequence[bool], scores: Sequence[float]) -> Optional[str]:
    """Lowest-scoring inlier wins; class name breaks exact ties."""
    best = None
    for name, ok, s in zip(names, inlier, scores):
        if ok and (best is None or (s, name) < best):
            best = (s, name)
    return best[1] if best else None


def _as_matrix(samples) -> np.ndarray:
    if len(samples) and isinstance(samples[0], FeatureVector):
        return np.stack([v.values for v in samples])
    return np.atleast_2d(np.asarray(samples, dtype=np.float64))


def _schema_of(datasets: Mapping[str, Sequence]) -> str:
    versions = {v.schema_version for s in datasets.values() for v in s
                if isinstance(v, FeatureVector)}
    if len(versions) > 1:
        raise SchemaMismatch(f"mixed schema versions: {sorted(versions)}")
    return versions.pop() if versions else ""


ParamSpec = Union[ForestParams, Mapping[str, ForestParams], None]


def _params_for(params: ParamSpec, name: str) -> ForestParams:
    if params is None:
        return ForestParams()
    if isinstance(params, ForestParams):
        return params
    return params.get(name, ForestParams())


def _fit_forest(name: str, Z: np.ndarray, p: ForestParams) -> iforest.IsolationForest:
    if Z.shape[0] < 2:
        raise EmptyClass(f"class {name!r} needs at least 2 samples, got {Z.shape[0]}")
    return iforest.fit(Z, p.contamination, p.n_estimators, p.subsample_size, p.seed, name)


def train_all(datasets: Mapping[str, Sequence], lda_dims: Optional[int] = None,
              params: ParamSpec = None, *, schema_version: Optional[str] = None,
              passthrough: bool = False, epsilon: float = DEFAULT_EPSILON,
              tuning: Optional[Mapping[str, dict]] = None) -> ClassifierRegistry:
    """Fit the shared projection on all class samples, then one forest per class.

    ``passthrough=True`` skips LDA (required for single-class registries).
    """
    if not datasets:
        raise EmptyClass("no classes to train")
    mats = {name: _as_matrix(s) for name, s in sorted(datasets.items())}
    for name, X in mats.items():
        if X.shape[0] < 2:
            raise EmptyClass(f"class {name!r} needs at least 2 samples, got {X.shape[0]}")
    dims = {X.shape[1] for X in mats.values()}
    if len(dims) > 1:
        raise DimensionMismatch(f"classes disagree on vector length: {sorted(dims)}")
    schema = schema_version if schema_version is not None else _schema_of(datasets)
    lda = None
    if not passthrough:
        if len(mats) < 2:
            raise DegenerateProjection(
                f"LDA rank bound C-1 = {len(mats) - 1}; a single-class registry needs passthrough")
        X = np.concatenate(list(mats.values()))
        labels = [name for name, M in mats.items() for _ in range(M.shape[0])]
        lda = fit_lda(LabeledDataset(X, labels, schema), lda_dims, epsilon)
    input_dim = dims.pop()
    entries = {}
    for name, X in mats.items():
        p = _params_for(params, name)
        Z = lda.transform(X) if lda is not None else X
        entries[name] = ClassifierEntry(_fit_forest(name, Z, p), p,
                                        (tuning or {}).get(name))
    return ClassifierRegistry(lda, entries, schema, input_dim)


def retrain_class(registry: ClassifierRegistry, name: str, samples: Sequence,
                  params: Optional[ForestParams] = None,
                  tuning: Optional[dict] = None) -> ClassifierRegistry:
    """Replace (or add) one class's forest; projection and siblings untouched."""
    X = _as_matrix(samples) if len(samples) else np.zeros((0, registry.input_dim))
    if isinstance(samples, Sequence) and samples and isinstance(samples[0], FeatureVector):
        bad = {v.schema_version for v in samples} - {registry.schema_version}
        if bad:
            raise SchemaMismatch(f"samples use schema {sorted(bad)}, registry {registry.schema_version}")
    if params is None:
        old = registry.classifiers.get(name)
        params = old.params if old is not None else ForestParams()
    forest = _fit_forest(name, registry.project(X) if X.shape[0] else X, params)
    entries = dict(registry.classifiers)
    entries[name] = ClassifierEntry(forest, params, tuning)
    return replace(registry, classifiers=entries,
                   registry_version=registry.registry_version + 1)


def refit_projection(registry: ClassifierRegistry, datasets: Mapping[str, Sequence],
                     lda_dims: Optional[int] = None) -> ClassifierRegistry:
    """Refit the shared projection and every forest.  Expensive path."""
    params = {name: e.params for name, e in registry.classifiers.items()}
    tuning = {name: e.tuning for name, e in registry.classifiers.items() if e.tuning}
    eps = registry.lda.epsilon if registry.lda is not None else DEFAULT_EPSILON
    fresh = train_all(datasets, lda_dims, params, schema_version=registry.schema_version,
                      passthrough=registry.lda is None, epsilon=eps, tuning=tuning)
    return replace(fresh, registry_version=registry.registry_version + 1)


def triage(registry: ClassifierRegistry, fv: FeatureVector) -> TriageVerdict:
    if fv.schema_version != registry.schema_version:
        raise SchemaMismatch(
            f"vector schema {fv.schema_version} != registry schema {registry.schema_version}")
    inl, sc = registry.accept_matrix(fv.values[None, :])
    names = registry.class_names
    per_class = {n: (bool(inl[0, j]), float(sc[0, j])) for j, n in enumerate(names)}
    return TriageVerdict(fv.sample_id, decide(names, inl[0], sc[0]), per_class,
                         registry.registry_version)


def error_verdict(sample_id: str, exc: BaseException, source: str = "") -> TriageVerdict:
    kind = exc.kind if isinstance(exc, TriageError) else type(exc).__name__
    return TriageVerdict(sample_id, None, {}, 0, (kind, str(exc)), source)


def batch_triage(registry: ClassifierRegistry, items: Iterable, schema=None) -> list[TriageVerdict]:
    """Triage FeatureVectors or file paths in order.

    Paths are extracted with ``schema``; a sample that cannot be read or
    parsed yields an error verdict instead of aborting the batch.
    """
    from .features.extract import extract_path
    from .features.schema import default_schema

    if schema is None:
        schema = default_schema()
    out = []
    for item in items:
        if isinstance(item, FeatureVector):
            try:
                out.append(triage(registry, item))
            except TriageError as exc:
                out.append(error_verdict(item.sample_id, exc))
            continue
        source = str(item)
        try:
            fv = extract_path(item, schema)
            v = triage(registry, fv)
            out.append(replace(v, source=source))
        except (TriageError, OSError, ValueError) as exc:
            log.warning("triage failed for %s: %s", source, exc)
            out.append(error_verdict(_hash_or_empty(item), exc, source))
    return out


def _hash_or_empty(path) -> str:
    from .features.extract import content_hash

    try:
        with open(path, "rb") as fh:
            return content_hash(fh.read())
    except OSError:
        return ""
