"""One-class isolation forest.

Trees are grown level by level for the whole ensemble at once.  Every tree
draws from its own random stream keyed by ``(seed, tree index)``, and the
random numbers a node consumes are addressed by the node's heap position, so
a tree's shape depends only on its data subsample and its stream.  Two
consequences the rest of the package relies on: build order is irrelevant,
and a forest of ``t`` trees is exactly the first ``t`` trees of a larger
forest with the same seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import EmptyClass, InvalidContamination

EULER_GAMMA = 0.5772156649
DEFAULT_SUBSAMPLE = 256
DEFAULT_ESTIMATORS = 100
DEFAULT_CONTAMINATION = 0.05
_CHUNK = 4096


def average_path_c(n):
    """Average unsuccessful-search path length in a BST of ``n`` points.

    c(n) = 2 H(n-1) - 2 (n-1)/n with H(i) ~ ln(i) + Euler's constant;
    c(0) = c(1) = 0.
    """
    arr = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(arr)
    m = arr >= 2
    k = arr[m]
    out[m] = 2.0 * (np.log(k - 1.0) + EULER_GAMMA) - 2.0 * (k - 1.0) / k
    return float(out) if out.ndim == 0 else out


def height_limit_for(psi: int) -> int:
    return max(1, math.ceil(math.log2(psi))) if psi > 1 else 0


def score_from_mean_path(mean_path, psi: int):
    """Anomaly score 2^(-E[h]/c(psi))."""
    return np.power(2.0, -np.asarray(mean_path, dtype=np.float64) / average_path_c(psi))


@dataclass(frozen=True, eq=False)
class IsolationTree:
    """Flat node arrays; node 0 is the root, ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray
    height_limit: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def path_length(self, x) -> float:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] < self.threshold[i] else self.right[i]
        return float(self.depth[i] + average_path_c(self.size[i]))


def path_length(tree: IsolationTree, x) -> float:
    return tree.path_length(np.asarray(x, dtype=np.float64))


def _split_values(lo, hi, u):
    s = lo + u * (hi - lo)
    bad = ~((s > lo) & (s < hi))
    if bad.any():
        mid = lo + (hi - lo) / 2.0
        s = np.where(bad, mid, s)
        # adjacent floats: no value strictly between, route min left / rest right
        bad = ~((s > lo) & (s < hi))
        s = np.where(bad, hi, s)
    return s


def _grow(subsamples: Sequence[np.ndarray], u_feat: np.ndarray, u_split: np.ndarray,
          height_limit: int) -> list[IsolationTree]:
    T = len(subsamples)
    X = np.concatenate(subsamples).astype(np.float64, copy=False)
    tree_of = np.repeat(np.arange(T, dtype=np.int64), [len(s) for s in subsamples])
    stride = np.int64(2) ** (height_limit + 1)
    pos = np.zeros(len(X), dtype=np.int64)
    active = np.arange(len(X))
    rec_key, rec_depth, rec_feat, rec_thr, rec_size = [], [], [], [], []

    for depth in range(height_limit + 1):
        if active.size == 0:
            break
        key = tree_of[active] * stride + pos[active]
        order = np.argsort(key, kind="stable")
        act, key = active[order], key[order]
        groups, start, counts = np.unique(key, return_index=True, return_counts=True)
        Xa = X[act]
        mins = np.minimum.reduceat(Xa, start, axis=0)
        maxs = np.maximum.reduceat(Xa, start, axis=0)
        splittable = maxs > mins
        n_split = splittable.sum(axis=1)
        internal = (counts > 1) & (n_split > 0) & (depth < height_limit)

        feat = np.full(len(groups), -1, dtype=np.int64)
        thr = np.zeros(len(groups))
        gi = np.flatnonzero(internal)
        if gi.size:
            g_tree, g_pos = groups[gi] // stride, groups[gi] % stride
            j = np.minimum((u_feat[g_tree, g_pos] * n_split[gi]).astype(np.int64), n_split[gi] - 1)
            # the (j+1)-th splittable feature
            f = np.argmax(np.cumsum(splittable[gi], axis=1) > j[:, None], axis=1)
            lo, hi = mins[gi, f], maxs[gi, f]
            feat[gi] = f
            thr[gi] = _split_values(lo, hi, u_split[g_tree, g_pos])

        rec_key.append(groups)
        rec_depth.append(np.full(len(groups), depth, dtype=np.int64))
        rec_feat.append(feat)
        rec_thr.append(thr)
        rec_size.append(counts.astype(np.int64))

        owner = np.repeat(np.arange(len(groups)), counts)
        pf = feat[owner]
        keep = pf >= 0
        act, owner, pf = act[keep], owner[keep], pf[keep]
        go_left = X[act, pf] < thr[owner]
        pos[act] = 2 * pos[act] + np.where(go_left, 1, 2)
        active = act

    key = np.concatenate(rec_key)
    order = np.argsort(key, kind="stable")
    key = key[order]
    depth = np.concatenate(rec_depth)[order]
    feat = np.concatenate(rec_feat)[order]
    thr = np.concatenate(rec_thr)[order]
    size = np.concatenate(rec_size)[order]
    tree_id = key // stride
    node_pos = key % stride
    bounds = np.searchsorted(tree_id, np.arange(T + 1))

    left = np.full(len(key), -1, dtype=np.int64)
    right = np.full(len(key), -1, dtype=np.int64)
    inner = np.flatnonzero(feat >= 0)
    left[inner] = np.searchsorted(key, tree_id[inner] * stride + 2 * node_pos[inner] + 1)
    right[inner] = np.searchsorted(key, tree_id[inner] * stride + 2 * node_pos[inner] + 2)

    trees = []
    for t in range(T):
        a, b = bounds[t], bounds[t + 1]
        lft, rgt = left[a:b].copy(), right[a:b].copy()
        lft[lft >= 0] -= a
        rgt[rgt >= 0] -= a
        trees.append(IsolationTree(feat[a:b].copy(), thr[a:b].copy(), lft, rgt,
                                   size[a:b].copy(), depth[a:b].copy(), height_limit))
    return trees


def _draw_uniforms(rng: np.random.Generator, height_limit: int) -> tuple[np.ndarray, np.ndarray]:
    n = max(2 ** height_limit - 1, 1)
    u = rng.random((2, n))
    return u[0], u[1]


def build_tree(samples, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    """Grow one isolation tree on all of ``samples``."""
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] == 0:
        raise EmptyClass("cannot build a tree on zero samples")
    uf, us = _draw_uniforms(rng, height_limit)
    return _grow([X], uf[None, :], us[None, :], height_limit)[0]


def tree_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def build_trees(X: np.ndarray, n_trees: int, psi: int, seed: int, start: int = 0) -> list[IsolationTree]:
    """Trees ``start .. start+n_trees-1`` of the forest keyed by ``seed``."""
    n = X.shape[0]
    psi = min(psi, n)
    h = height_limit_for(psi)
    subs, ufs, uss = [], [], []
    for i in range(start, start + n_trees):
        rng = tree_stream(seed, i)
        idx = np.sort(rng.choice(n, size=psi, replace=False))
        uf, us = _draw_uniforms(rng, h)
        subs.append(X[idx])
        ufs.append(uf)
        uss.append(us)
    if not subs:
        return []
    return _grow(subs, np.stack(ufs), np.stack(uss), h)


def contamination_threshold(scores: np.ndarray, contamination: float) -> float:
    """Smallest training score with at least a (1 - contamination) share of
    the training scores at or below it."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    n = len(s)
    k = n - math.floor(contamination * n + 1e-9)
    return float(s[max(k, 1) - 1])


@dataclass(frozen=True)
class _Stacked:
    roots: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_path: np.ndarray
    max_height: int


@dataclass(frozen=True, eq=False)
class IsolationForest:
    trees: tuple[IsolationTree, ...]
    subsample_size: int
    contamination: float
    threshold: float
    rng_seed: int
    dim: int
    class_name: str = ""

    @property
    def n_estimators(self) -> int:
        return len(self.trees)

    @cached_property
    def _stacked(self) -> _Stacked:
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        def cat(attr, shift=False):
            parts = []
            for off, t in zip(offsets, self.trees):
                a = getattr(t, attr)
                parts.append(np.where(a >= 0, a + off, a) if shift else a)
            return np.concatenate(parts)
        depth = cat("depth")
        size = cat("size")
        return _Stacked(
            roots=offsets[:-1].astype(np.int64),
            feature=cat("feature"),
            threshold=cat("threshold"),
            left=cat("left", shift=True),
            right=cat("right", shift=True),
            leaf_path=depth + average_path_c(size),
            max_height=max(t.height_limit for t in self.trees),
        )

    def path_lengths(self, X) -> np.ndarray:
        """(n_samples, n_trees) matrix of per-tree path lengths."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        st = self._stacked
        out = np.empty((X.shape[0], len(self.trees)))
        for lo in range(0, X.shape[0], _CHUNK):
            Xc = X[lo:lo + _CHUNK]
            n = Xc.shape[0]
            cur = np.repeat(st.roots[None, :], n, axis=0)
            rows = np.arange(n)[:, None]
            for _ in range(st.max_height):
                f = st.feature[cur]
                internal = f >= 0
                if not internal.any():
                    break
                xv = Xc[rows, np.where(internal, f, 0)]
                nxt = np.where(xv < st.threshold[cur], st.left[cur], st.right[cur])
                cur = np.where(internal, nxt, cur)
            out[lo:lo + n] = st.leaf_path[cur]
        return out

    def mean_path_length(self, X) -> np.ndarray:
        return self.path_lengths(X).sum(axis=1) / len(self.trees)

    def score(self, X) -> np.ndarray:
        return score_from_mean_path(self.mean_path_length(X), self.subsample_size)

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        """(inlier mask, scores); inlier iff score <= threshold."""
        s = self.score(X)
        return s <= self.threshold, s

    def prefix(self, n_estimators: int, contamination: float, train) -> "IsolationForest":
        """First ``n_estimators`` trees with a threshold refitted on ``train``;
        identical to fitting that smaller forest directly."""
        if not 1 <= n_estimators <= len(self.trees):
            raise ValueError(f"n_estimators must be in [1, {len(self.trees)}]")
        _check_contamination(contamination)
        sub = replace(self, trees=self.trees[:n_estimators], contamination=contamination,
                      threshold=0.0)
        thr = contamination_threshold(sub.score(train), contamination)
        return replace(sub, threshold=thr)


def score(forest: IsolationForest, x) -> float:
    return float(forest.score(np.asarray(x, dtype=np.float64)[None, :])[0])


def predict(forest: IsolationForest, x) -> tuple[str, float]:
    s = score(forest, x)
    return ("inlier" if s <= forest.threshold else "outlier"), s


def _check_contamination(c: float) -> None:
    if not (0.0 <= c < 0.5) or math.isnan(c):
        raise InvalidContamination(f"contamination must lie in [0, 0.5), got {c}")


def fit(samples, contamination: float = DEFAULT_CONTAMINATION,
        n_estimators: int = DEFAULT_ESTIMATORS, subsample_size: int = DEFAULT_SUBSAMPLE,
        seed: int = 0, class_name: str = "") -> IsolationForest:
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] < 2:
        raise EmptyClass(f"class {class_name!r} needs at least 2 samples, got {X.shape[0]}")
    _check_contamination(contamination)
    if n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    if subsample_size < 2:
        raise ValueError("subsample_size must be >= 2")
    psi = min(subsample_size, X.shape[0])
    trees = build_trees(X, n_estimators, psi, seed)
    forest = IsolationForest(tuple(trees), psi, contamination, 0.0, seed, X.shape[1], class_name)
    thr = contamination_threshold(forest.score(X), contamination)
    return replace(forest, threshold=thr)
