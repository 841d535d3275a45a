"""Cross-validated evaluation: stratified folds, per-class parameter tuning,
confusion matrices and the reported metrics."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import iforest
from .errors import EmptyGrid, EmptyMatrix, TooFewSamples
from .triage import ClassifierRegistry, ForestParams, train_all

DEFAULT_K = 10
DEFAULT_GRID: tuple[tuple[float, int], ...] = tuple(
    (c, t) for c in (0.0, 0.01, 0.02, 0.05, 0.1) for t in (50, 100, 200))


def derive_seed(seed: int, *tags) -> int:
    """Independent child seed for a (fold, class, ...) job."""
    ints = [int(seed)] + [zlib.crc32(t.encode()) if isinstance(t, str) else int(t) for t in tags]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


# -- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int = 0
    fp: int = 0
    fn: int = 0
    tp: int = 0

    def __post_init__(self):
        for name in ("tn", "fp", "fn", "tp"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tn + other.tn, self.fp + other.fp,
                               self.fn + other.fn, self.tp + other.tp)

    @classmethod
    def from_predictions(cls, truth, predicted) -> "ConfusionMatrix":
        t = np.asarray(truth, dtype=bool)
        p = np.asarray(predicted, dtype=bool)
        return cls(int(np.sum(~t & ~p)), int(np.sum(~t & p)),
                   int(np.sum(t & ~p)), int(np.sum(t & p)))

    def to_dict(self) -> dict:
        return {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp}


def _truncated_percent(num: int, den: int) -> int:
    return int(Fraction(100 * num, den)) if den else 0


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_defined: bool = True
    recall_defined: bool = True
    percent: Mapping[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: round(getattr(self, k), 4) for k in ("accuracy", "precision", "recall", "f1")}
        out["percent"] = dict(self.percent)
        if not self.precision_defined:
            out["precision_undefined"] = True
        if not self.recall_defined:
            out["recall_undefined"] = True
        return out


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, precision, recall and F1.

    Precision with no predicted positives is reported as 0 and flagged
    undefined.  Percentages are truncated toward zero.
    """
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has no entries")
    acc_f = Fraction(cm.tp + cm.tn, cm.total)
    prec_f = Fraction(cm.tp, cm.tp + cm.fp) if cm.tp + cm.fp else Fraction(0)
    rec_f = Fraction(cm.tp, cm.tp + cm.fn) if cm.tp + cm.fn else Fraction(0)
    f1_f = 2 * prec_f * rec_f / (prec_f + rec_f) if prec_f + rec_f else Fraction(0)
    pct = {name: int(100 * v) for name, v in
           (("accuracy", acc_f), ("precision", prec_f), ("recall", rec_f), ("f1", f1_f))}
    return MetricsReport(float(acc_f), float(prec_f), float(rec_f), float(f1_f),
                         cm.tp + cm.fp > 0, cm.tp + cm.fn > 0, pct)


# -- folds ------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: tuple[int, ...]
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.assignment) == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.assignment) != fold)


def stratified_kfold(labels: Sequence, k: int, seed: int = 0) -> FoldAssignment:
    """Shuffle each class and deal it round-robin over the folds.

    The dealing position carries over from class to class so overall fold
    sizes stay balanced too.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    labels = list(labels)
    if len(labels) < k:
        raise TooFewSamples(f"{len(labels)} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    by_class: dict = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    nxt = 0
    for lab in sorted(by_class, key=str):
        idx = np.array(by_class[lab])
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = (nxt + np.arange(len(idx))) % k
        nxt = (nxt + len(idx)) % k
    return FoldAssignment(k, tuple(int(a) for a in assignment), seed)


# -- tuning -----------------------------------------------------------------

@dataclass(frozen=True)
class TuningResult:
    class_name: str
    grid: tuple[tuple[float, int], ...]
    metrics: tuple[tuple[ConfusionMatrix, MetricsReport], ...]
    chosen: tuple[float, int]

    def objective(self, i: int) -> tuple:
        c, t = self.grid[i]
        m = self.metrics[i][1]
        return (m.precision, m.accuracy, -t, -c)

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "chosen": {"contamination": self.chosen[0], "n_estimators": self.chosen[1]},
            "trace": [
                {"contamination": c, "n_estimators": t, "confusion_matrix": cm.to_dict(),
                 "metrics": m.to_dict()}
                for (c, t), (cm, m) in zip(self.grid, self.metrics)
            ],
        }


def _zero_safe_metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total == 0:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, False, False,
                             {"accuracy": 0, "precision": 0, "recall": 0, "f1": 0})
    return compute_metrics(cm)


def choose(grid: Sequence[tuple[float, int]], reports: Sequence[MetricsReport]) -> int:
    """Index of the best grid point: precision, then accuracy, then fewer
    trees, then lower contamination."""
    keys = [(m.precision, m.accuracy, -t, -c) for (c, t), m in zip(grid, reports)]
    return max(range(len(grid)), key=lambda i: keys[i])


def grid_tune(class_samples, sibling_samples=None, grid: Sequence[tuple[float, int]] = DEFAULT_GRID,
              k: int = DEFAULT_K, seed: int = 0, subsample_size: int = iforest.DEFAULT_SUBSAMPLE,
              class_name: str = "", use_siblings: bool = True) -> TuningResult:
    """Cross-validate every (contamination, n_estimators) point for one class.

    Positives are the class's held-out fold; negatives are the sibling
    samples (every fold) when ``use_siblings`` is set.
    """
    grid = tuple((float(c), int(t)) for c, t in grid)
    if not grid:
        raise EmptyGrid("parameter grid is empty")
    X = np.atleast_2d(np.asarray(class_samples, dtype=np.float64))
    S = None
    if use_siblings and sibling_samples is not None and len(sibling_samples):
        S = np.atleast_2d(np.asarray(sibling_samples, dtype=np.float64))
    n = X.shape[0]
    k_eff = min(k, n)
    counts = {p: ConfusionMatrix() for p in grid}
    if k_eff >= 2:
        folds = stratified_kfold([class_name] * n, k_eff, seed)
        max_t = max(t for _, t in grid)
        estimators = sorted({t for _, t in grid})
        for f in range(k_eff):
            tr, te = folds.train_indices(f), folds.test_indices(f)
            if len(tr) < 2:
                continue
            big = iforest.fit(X[tr], 0.0, max_t, subsample_size, derive_seed(seed, f), class_name)
            p_tr = big.path_lengths(X[tr])
            p_te = big.path_lengths(X[te])
            p_sib = big.path_lengths(S) if S is not None else None
            for t in estimators:
                sc = lambda P: iforest.score_from_mean_path(P[:, :t].sum(axis=1) / t, big.subsample_size)
                s_tr, s_te = sc(p_tr), sc(p_te)
                s_sib = sc(p_sib) if p_sib is not None else np.zeros(0)
                for c, tt in grid:
                    if tt != t:
                        continue
                    thr = iforest.contamination_threshold(s_tr, c)
                    acc_te = int(np.sum(s_te <= thr))
                    acc_sib = int(np.sum(s_sib <= thr))
                    counts[(c, t)] = counts[(c, t)] + ConfusionMatrix(
                        tn=len(s_sib) - acc_sib, fp=acc_sib, fn=len(s_te) - acc_te, tp=acc_te)
    results = tuple((counts[p], _zero_safe_metrics(counts[p])) for p in grid)
    best = choose(grid, [m for _, m in results])
    return TuningResult(class_name, grid, results, grid[best])


def tune_and_train(datasets: Mapping[str, Sequence], grid: Sequence[tuple[float, int]] = DEFAULT_GRID,
                   k: int = DEFAULT_K, seed: int = 0, lda_dims: Optional[int] = None,
                   subsample_size: int = iforest.DEFAULT_SUBSAMPLE, use_siblings: bool = True,
                   schema_version: Optional[str] = None) -> ClassifierRegistry:
    """Tune each class on the projected training data, then train the final
    registry on all of it with the chosen parameters."""
    probe = train_all(datasets, lda_dims, ForestParams(n_estimators=1, subsample_size=subsample_size),
                      schema_version=schema_version)
    projected = {name: probe.project(np.asarray(_rows(s))) for name, s in sorted(datasets.items())}
    params, records = {}, {}
    for name, Z in projected.items():
        sib = [v for other, W in projected.items() if other != name for v in W]
        res = grid_tune(Z, np.asarray(sib) if sib else None, grid, k,
                        derive_seed(seed, "tune", name), subsample_size, name, use_siblings)
        c, t = res.chosen
        params[name] = ForestParams(c, t, subsample_size, derive_seed(seed, "final", name))
        records[name] = res.to_dict()
    return train_all(datasets, lda_dims, params, schema_version=probe.schema_version,
                     tuning=records)


def _rows(samples):
    from .features.extract import FeatureVector

    if len(samples) and isinstance(samples[0], FeatureVector):
        return [v.values for v in samples]
    return samples


# -- cross-validated evaluation ---------------------------------------------

RegistryBuilder = Callable[[Mapping[str, np.ndarray], int], ClassifierRegistry]


@dataclass
class FoldResult:
    fold: int
    registry: ClassifierRegistry
    test_indices: np.ndarray
    apt_inlier: np.ndarray  # (n_test, n_classes)
    apt_scores: np.ndarray
    non_apt_inlier: np.ndarray
    non_apt_scores: np.ndarray
    matrix: ConfusionMatrix


@dataclass
class TriageEvaluation:
    matrix: ConfusionMatrix
    metrics: MetricsReport
    folds: list[FoldResult]
    labels: tuple[str, ...]
    k: int
    seed: int


def default_builder(grid=DEFAULT_GRID, k: int = DEFAULT_K, lda_dims: Optional[int] = None,
                    subsample_size: int = iforest.DEFAULT_SUBSAMPLE,
                    use_siblings: bool = True) -> RegistryBuilder:
    def build(datasets, seed):
        return tune_and_train(datasets, grid, k, seed, lda_dims, subsample_size, use_siblings)
    return build


def evaluate_triage(builder: RegistryBuilder, apt_vectors, apt_labels: Sequence[str],
                    non_apt_vectors=None, k: int = DEFAULT_K, seed: int = 0) -> TriageEvaluation:
    """k-fold: train on k-1 folds of APT samples; test on the held-out fold
    (positives) plus every non-APT sample (negatives).  A sample counts as
    APT when any class accepts it."""
    X = np.atleast_2d(np.asarray(apt_vectors, dtype=np.float64))
    labels = tuple(apt_labels)
    N = (np.atleast_2d(np.asarray(non_apt_vectors, dtype=np.float64))
         if non_apt_vectors is not None and len(non_apt_vectors) else np.zeros((0, X.shape[1])))
    folds = stratified_kfold(labels, k, seed)
    lab = np.asarray(labels, dtype=object)
    results, total = [], ConfusionMatrix()
    for f in range(k):
        tr, te = folds.train_indices(f), folds.test_indices(f)
        datasets = {c: X[tr][lab[tr] == c] for c in sorted(set(lab[tr].tolist()))}
        try:
            registry = builder(datasets, derive_seed(seed, "fold", f))
        except Exception as exc:
            raise type(exc)(f"fold {f}: {exc}") from exc
        inl_a, sc_a = registry.accept_matrix(X[te]) if len(te) else (
            np.zeros((0, len(registry.class_names)), bool), np.zeros((0, len(registry.class_names))))
        inl_n, sc_n = registry.accept_matrix(N) if len(N) else (
            np.zeros((0, len(registry.class_names)), bool), np.zeros((0, len(registry.class_names))))
        cm = ConfusionMatrix.from_predictions(
            np.r_[np.ones(len(te), bool), np.zeros(len(N), bool)],
            np.r_[inl_a.any(axis=1), inl_n.any(axis=1)])
        total = total + cm
        results.append(FoldResult(f, registry, te, inl_a, sc_a, inl_n, sc_n, cm))
    return TriageEvaluation(total, compute_metrics(total), results, labels, k, seed)


@dataclass
class IdentificationResult:
    matrix: ConfusionMatrix
    metrics: MetricsReport
    per_class: dict[str, ConfusionMatrix]
    samples_considered: int


def evaluate_identification(folds: Sequence[FoldResult], apt_labels: Sequence[str],
                            triaged_only: bool = True) -> IdentificationResult:
    """One-vs-rest matrix per class over held-out APT samples (by default only
    those the triage flagged as APT); the global matrix is their sum."""
    lab = np.asarray(apt_labels, dtype=object)
    per_class: dict[str, ConfusionMatrix] = {}
    considered = 0
    for fr in folds:
        keep = fr.apt_inlier.any(axis=1) if triaged_only else np.ones(len(fr.test_indices), bool)
        truth_labels = lab[fr.test_indices][keep]
        inl = fr.apt_inlier[keep]
        considered += int(keep.sum())
        for j, name in enumerate(fr.registry.class_names):
            cm = ConfusionMatrix.from_predictions(truth_labels == name, inl[:, j])
            per_class[name] = per_class.get(name, ConfusionMatrix()) + cm
    total = ConfusionMatrix()
    for name in sorted(per_class):
        total = total + per_class[name]
    metrics = _zero_safe_metrics(total)
    return IdentificationResult(total, metrics, dict(sorted(per_class.items())), considered)


def evaluation_report(tri: TriageEvaluation, ident: Optional[IdentificationResult] = None) -> dict:
    """Deterministically ordered report document."""
    rep: dict = {
        "k": tri.k,
        "seed": tri.seed,
        "apt_samples": len(tri.labels),
        "triage": {"confusion_matrix": tri.matrix.to_dict(), "metrics": tri.metrics.to_dict(),
                   "per_fold": [fr.matrix.to_dict() for fr in tri.folds]},
    }
    if ident is not None:
        rep["identification"] = {
            "samples_considered": ident.samples_considered,
            "confusion_matrix": ident.matrix.to_dict(),
            "metrics": ident.metrics.to_dict(),
            "per_class": {name: {"confusion_matrix": cm.to_dict(),
                                 "metrics": _zero_safe_metrics(cm).to_dict()}
                          for name, cm in ident.per_class.items()},
        }
    rep["tuning"] = [
        {"fold": fr.fold,
         "chosen": {name: e.tuning["chosen"] if e.tuning else e.params.to_dict()
                    for name, e in fr.registry.classifiers.items()}}
        for fr in tri.folds
    ]
    return rep
