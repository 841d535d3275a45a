"""Linear Discriminant Analysis used to shrink feature vectors before the
per-class isolation forests see them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import DegenerateData, DegenerateProjection, DimensionMismatch
from .features.extract import FeatureVector

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class LabeledDataset:
    """Row-aligned samples and class labels.

    ``vectors`` is an (n, M) array; build from FeatureVectors with
    :meth:`from_vectors` to get schema checking.
    """

    vectors: np.ndarray
    labels: tuple[str, ...]
    schema_version: str = ""

    def __post_init__(self):
        X = np.asarray(self.vectors, dtype=np.float64)
        if X.ndim != 2:
            raise DimensionMismatch("vectors must form a 2-D array")
        if X.shape[0] != len(self.labels):
            raise DimensionMismatch(
                f"{X.shape[0]} vectors but {len(self.labels)} labels")
        object.__setattr__(self, "vectors", X)
        object.__setattr__(self, "labels", tuple(self.labels))

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector], labels: Sequence[str]) -> "LabeledDataset":
        versions = {v.schema_version for v in vectors}
        if len(versions) > 1:
            raise DimensionMismatch(f"mixed schema versions: {sorted(versions)}")
        lengths = {len(v) for v in vectors}
        if len(lengths) > 1:
            raise DimensionMismatch(f"mixed vector lengths: {sorted(lengths)}")
        X = np.stack([v.values for v in vectors]) if vectors else np.zeros((0, 0))
        return cls(X, tuple(labels), versions.pop() if versions else "")

    @property
    def class_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(sorted(set(self.labels)))}


@dataclass(frozen=True, eq=False)
class LdaModel:
    projection: np.ndarray  # (M, L), columns by descending eigenvalue
    eigenvalues: np.ndarray
    class_names: tuple[str, ...]
    class_means: np.ndarray  # (C, M)
    global_mean: np.ndarray
    epsilon: float
    schema_version: str = ""

    @property
    def input_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def output_dim(self) -> int:
        return self.projection.shape[1]

    def transform(self, X) -> np.ndarray:
        return transform(self, X)


def scatter_matrices(X: np.ndarray, labels: Sequence[str]) -> tuple[np.ndarray, np.ndarray, list[str], np.ndarray, np.ndarray]:
    """Within-class and between-class scatter plus the class/global means."""
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    mu = X.mean(axis=0)
    M = X.shape[1]
    Sw = np.zeros((M, M))
    Sb = np.zeros((M, M))
    means = np.empty((len(classes), M))
    for i, c in enumerate(classes):
        Xc = X[labels == c]
        means[i] = Xc.mean(axis=0)
        D = Xc - means[i]
        Sw += D.T @ D
        d = (means[i] - mu)[:, None]
        Sb += len(Xc) * (d @ d.T)
    return Sw, Sb, classes, means, mu


def regularize(Sw: np.ndarray, epsilon: float) -> np.ndarray:
    M = Sw.shape[0]
    scale = np.trace(Sw) / M
    if scale <= 0:
        scale = 1.0
    return Sw + epsilon * scale * np.eye(M)


def normalize_columns(W: np.ndarray) -> np.ndarray:
    """Unit-length columns whose largest-magnitude entry is positive."""
    W = W / np.linalg.norm(W, axis=0, keepdims=True)
    # first index of the max |entry| keeps the choice deterministic on ties
    pivots = np.argmax(np.abs(W), axis=0)
    signs = np.sign(W[pivots, np.arange(W.shape[1])])
    signs[signs == 0] = 1.0
    return W * signs


def fit_lda(data: LabeledDataset, L: Optional[int] = None,
            epsilon: float = DEFAULT_EPSILON) -> LdaModel:
    """Fit the discriminant projection; L defaults to (number of classes - 1)."""
    X, labels = data.vectors, data.labels
    counts: dict[str, int] = {}
    for c in labels:
        counts[c] = counts.get(c, 0) + 1
    small = sorted(c for c, n in counts.items() if n < 2)
    if small:
        raise DegenerateData(f"classes with fewer than 2 samples: {small}")
    C = len(counts)
    if C < 2:
        raise DegenerateProjection(
            f"LDA needs at least 2 classes, got {C}; rank bound C-1 = {max(C - 1, 0)}")
    if L is not None and L < 1:
        raise ValueError("L must be >= 1")
    L_eff = C - 1 if L is None else min(L, C - 1)

    Sw, Sb, classes, means, mu = scatter_matrices(X, labels)
    Sw_r = regularize(Sw, epsilon)
    vals, vecs = scipy.linalg.eigh(Sb, Sw_r)
    order = np.argsort(-vals, kind="stable")[:L_eff]
    W = normalize_columns(vecs[:, order])
    return LdaModel(
        projection=W,
        eigenvalues=vals[order],
        class_names=tuple(classes),
        class_means=means,
        global_mean=mu,
        epsilon=epsilon,
        schema_version=data.schema_version,
    )


def transform(model: LdaModel, v) -> np.ndarray:
    """Project one vector (or a stack of rows) onto the discriminant axes."""
    if isinstance(v, FeatureVector):
        if model.schema_version and v.schema_version != model.schema_version:
            raise DimensionMismatch(
                f"vector schema {v.schema_version} != model schema {model.schema_version}")
        v = v.values
    x = np.asarray(v, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise DimensionMismatch(f"expected {model.input_dim} features, got {x.shape[-1]}")
    return (x - model.global_mean) @ model.projection


def fisher_criterion(W: np.ndarray, Sw: np.ndarray, Sb: np.ndarray) -> float:
    """trace((W'SwW)^-1 (W'SbW))."""
    A = W.T @ Sw @ W
    B = W.T @ Sb @ W
    return float(np.trace(np.linalg.solve(A, B)))
