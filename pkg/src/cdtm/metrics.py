"""AUC and relative improvement."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank sum; tied scores share the average rank."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined with a single class")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pairwise_auc(scores, labels) -> float:
    """O(n^2) reference: fraction of (positive, negative) pairs ranked correctly, ties 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    p, n = s[y == 1], s[y == 0]
    if p.size == 0 or n.size == 0:
        raise ValueError("AUC is undefined with a single class")
    diff = p[:, None] - n[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (p.size * n.size))


def imp(auc_value: float, auc_base: float) -> float:
    """Relative AUC improvement over the base model, in percent."""
    if auc_base <= 0:
        raise ValueError("base AUC must be positive")
    return (auc_value - auc_base) / auc_base * 100.0
