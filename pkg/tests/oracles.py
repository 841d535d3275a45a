"""Independent reference computations used by the tests.

Each oracle is written from the textbook definition, without reusing the
package's vectorised code paths.
"""
from __future__ import annotations


import math

import mpmath
import numpy as np


def c_exact(n: int) -> float:
    """c(n) in 50-digit arithmetic."""
    if n < 2:
        return 0.0
    mpmath.mp.dps = 50
    k = mpmath.mpf(n)
    return float(2 * (mpmath.log(k - 1) + mpmath.mpf("0.5772156649")) - 2 * (k - 1) / k)


def c_float(n: int) -> float:
    """c(n) with scalar math calls."""
    if n < 2:
        return 0.0
    return 2.0 * (math.log(n - 1.0) + 0.5772156649) - 2.0 * (n - 1.0) / n


def recursive_path(tree, x, node=0, depth=0) -> float:
    """Walk the tree by explicit recursion from the root."""
    f = int(tree.feature[node])
    if f < 0:
        return depth + c_float(int(tree.size[node]))
    child = tree.left[node] if x[f] < tree.threshold[node] else tree.right[node]
    return recursive_path(tree, x, int(child), depth + 1)


def lda_eig_oracle(X, labels, L, epsilon=1e-6):
    """Dense eigen-solve of inv(Sw_r) @ Sb, then unit columns with the
    largest-magnitude entry positive."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    mu = X.mean(axis=0)
    M = X.shape[1]
    Sw = np.zeros((M, M))
    Sb = np.zeros((M, M))
    for c in sorted(set(labels.tolist())):
        Xc = X[labels == c]
        mc = Xc.mean(axis=0)
        D = Xc - mc
        Sw += D.T @ D
        d = (mc - mu)[:, None]
        Sb += len(Xc) * (d @ d.T)
    scale = np.trace(Sw) / M or 1.0
    Swr = Sw + epsilon * scale * np.eye(M)
    vals, vecs = np.linalg.eig(np.linalg.solve(Swr, Sb))
    vals, vecs = vals.real, vecs.real
    order = np.argsort(-vals, kind="stable")[:L]
    W = vecs[:, order]
    W = W / np.linalg.norm(W, axis=0)
    for j in range(W.shape[1]):
        if W[np.argmax(np.abs(W[:, j])), j] < 0:
            W[:, j] = -W[:, j]
    return W, vals[order], Sw, Sb


def count_ascii_runs(raw: bytes, min_len: int = 5) -> int:
    """Byte-by-byte scan for printable runs."""
    count = run = 0
    for b in raw:
        if 0x20 <= b <= 0x7E:
            run += 1
        else:
            if run >= min_len:
                count += 1
            run = 0
    return count + (run >= min_len)


def metrics_by_hand(tn, fp, fn, tp):
    acc = (tp + tn) / (tn + fp + fn + tp)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, prec, rec, f1


