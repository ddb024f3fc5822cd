"""Evaluation metrics, written against first definitions.

scipy/sklearn implementations exist for most of these; they stay out of the
package on purpose so the test suite can use them as independent oracles.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractError

# two-sided 95% normal quantile
Z_95 = 1.959963984540054


def _check_nonempty(*arrays):
    for a in arrays:
        if np.asarray(a).size == 0:
            raise ContractError("metric input is empty")


def accuracy(pred, labels) -> float:
    _check_nonempty(pred, labels)
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred == labels))


def confusion_matrix(pred, labels, num_classes: int) -> np.ndarray:
    """rows = true class, columns = predicted class."""
    _check_nonempty(pred, labels)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, t in zip(np.asarray(pred), np.asarray(labels)):
        cm[int(t), int(p)] += 1
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def macro_f1(pred, labels, num_classes: int) -> float:
    return float(per_class_f1(confusion_matrix(pred, labels, num_classes)).mean())


def weighted_f1(pred, labels, num_classes: int) -> float:
    cm = confusion_matrix(pred, labels, num_classes)
    support = cm.sum(axis=1)
    f1 = per_class_f1(cm)
    return float((f1 * support).sum() / support.sum())


def mae(pred, target) -> float:
    _check_nonempty(pred, target)
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(target))))


def rmse(pred, target) -> float:
    _check_nonempty(pred, target)
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(target)) ** 2)))


def r_squared(pred, target) -> float:
    _check_nonempty(pred, target)
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    ss_res = np.sum((target - pred) ** 2)
    ss_tot = np.sum((target - target.mean()) ** 2)
    if ss_tot == 0.0:
        return 0.0
    return float(1.0 - ss_res / ss_tot)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank block."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b) -> float:
    """Rank correlation with average-rank ties; degenerate input -> 0."""
    _check_nonempty(a, b)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ContractError(f"length mismatch: {len(a)} vs {len(b)}")
    ra, rb = _average_ranks(a), _average_ranks(b)
    sa, sb = ra.std(), rb.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.mean((ra - ra.mean()) * (rb - rb.mean())) / (sa * sb))


def within_one_ordinal(pred, target) -> float:
    """Fraction with |round(pred) - target| <= 1 on the 0/1/2 scale."""
    _check_nonempty(pred, target)
    rounded = np.rint(np.asarray(pred, dtype=np.float64))
    return float(np.mean(np.abs(rounded - np.asarray(target)) <= 1.0))


def auroc(scores, is_positive) -> float:
    """Rank-based (Mann-Whitney) AUROC; ties split evenly."""
    _check_nonempty(scores, is_positive)
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUROC needs both positive and negative samples")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def normal_ci(values) -> tuple[float, float]:
    """-> (mean, 95% half-width) under the normal approximation."""
    _check_nonempty(values)
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return float(values.mean()), 0.0
    sem = values.std(ddof=1) / np.sqrt(len(values))
    return float(values.mean()), float(Z_95 * sem)


def confusion_decomposition(cm: np.ndarray, type_of_class) -> dict:
    """Split errors into within-type severity confusions vs cross-type.

    ``type_of_class[i]`` names the damage type of class i. The three buckets
    always partition the sample count.
    """
    correct = int(np.diag(cm).sum())
    within = 0
    cross = 0
    n = cm.shape[0]
    for t in range(n):
        for p in range(n):
            if t == p:
                continue
            if type_of_class[t] == type_of_class[p]:
                within += int(cm[t, p])
            else:
                cross += int(cm[t, p])
    return {"correct": correct, "within_type": within, "cross_type": cross,
            "total": correct + within + cross}
